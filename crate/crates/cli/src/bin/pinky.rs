//! Batch runner and calibration tool.

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pinky_cli::split_setting;
use pinky_core::engine::{Engine, StopReason};
use pinky_core::loader::load_process;
use pinky_core::metrics::{calibrate, read_calibration_csv, write_weights_csv, COUNTER_NAMES};
use pinky_core::vfs::{pack_dir, Vfs};

#[derive(Parser)]
#[command(version, about = "Run guest samples and calibrate the stopping metric")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a sample to completion or to a stop condition.
    Run {
        /// Container image; without it the sample's directory is packed.
        #[arg(long)]
        vfs: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        settings: Vec<String>,
        /// Print the counters as a CSV row to stderr when the run stops.
        #[arg(long)]
        counters: bool,
        sample: String,
    },
    /// Fit counter weights from a CSV of counters and `time_seconds`.
    Calibrate {
        csv: PathBuf,
        /// Write the weights here instead of stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn run(
    vfs: Option<PathBuf>,
    settings: &[String],
    counters: bool,
    sample: &str,
) -> Result<ExitCode> {
    let mut e = Engine::new();
    for pair in settings {
        let (k, v) = split_setting(pair).map_err(anyhow::Error::msg)?;
        e.set_config_str(k, v)?;
    }
    let name = match vfs {
        Some(path) => {
            e.machine.os.vfs = Some(Vfs::init(
                fs::read(&path).with_context(|| format!("reading {}", path.display()))?,
            )?);
            sample.to_string()
        }
        None => {
            let host = PathBuf::from(sample);
            let dir = host
                .parent()
                .filter(|d| !d.as_os_str().is_empty())
                .map(PathBuf::from)
                .unwrap_or_else(|| ".".into());
            e.machine.os.vfs = Some(Vfs::init(pack_dir(&dir)?)?);
            host.file_name()
                .context("sample is not a file")?
                .to_string_lossy()
                .into_owned()
        }
    };
    e.log.echo_stderr = true;
    load_process(&mut e, &name)?;
    let stop = e.run();
    io::stdout().write_all(&e.machine.os.stdout)?;
    if counters {
        eprintln!("{}", COUNTER_NAMES.join(","));
        let row: Vec<String> = e
            .machine
            .counters
            .values
            .iter()
            .map(u64::to_string)
            .collect();
        eprintln!("{}", row.join(","));
    }
    match stop {
        StopReason::GuestExit(code) => Ok(ExitCode::from((code & 0xFF) as u8)),
        other => {
            eprintln!("stopped: {other}");
            Ok(ExitCode::from(
                if matches!(other, StopReason::MetricThreshold(_)) {
                    0
                } else {
                    1
                },
            ))
        }
    }
}

fn main() -> Result<ExitCode> {
    match Args::parse().cmd {
        Cmd::Run {
            vfs,
            settings,
            counters,
            sample,
        } => run(vfs, &settings, counters, &sample),
        Cmd::Calibrate { csv, out } => {
            let file =
                fs::File::open(&csv).with_context(|| format!("opening {}", csv.display()))?;
            let data = read_calibration_csv(file)?;
            if data.times.is_empty() {
                bail!("{} has no rows", csv.display());
            }
            let cal = calibrate(&data.counters, &data.times)?;
            eprintln!(
                "residual {:e} (relative {:e}), condition {:e}",
                cal.residual_norm, cal.relative_residual, cal.condition
            );
            for i in &cal.negative {
                eprintln!("warning: weight for {} is negative", data.names[*i]);
            }
            match out {
                Some(path) => {
                    write_weights_csv(fs::File::create(&path)?, &data.names, &cal.weights)?
                }
                None => write_weights_csv(io::stdout().lock(), &data.names, &cal.weights)?,
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
