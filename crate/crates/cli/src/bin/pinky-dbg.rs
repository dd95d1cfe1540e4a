//! Interactive debugger.

use std::fs;
use std::io::{self, BufReader, IsTerminal};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use pinky_cli::{split_setting, Command, ReplMode, Session};

#[derive(Parser)]
#[command(version, about = "Debug a guest sample under the emulator")]
struct Args {
    /// Container image holding the sample and its DLLs.
    #[arg(long)]
    vfs: Option<PathBuf>,
    /// Setting applied before anything runs, as key=value. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    settings: Vec<String>,
    /// Read commands from this file; a parse error exits with code 2.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Sample to run before reading commands.
    sample: Option<String>,
}

fn main() -> Result<ExitCode> {
    let args = Args::parse();
    let mut session = Session::new();
    if let Some(path) = &args.vfs {
        session
            .set_vfs_image(fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    for pair in &args.settings {
        let (k, v) = split_setting(pair).map_err(anyhow::Error::msg)?;
        session.add_setting(k, v).map_err(anyhow::Error::msg)?;
    }
    let stdout = io::stdout();
    let mut out = stdout.lock();
    if let Some(sample) = args.sample {
        session.execute(Command::Run(sample), &mut out)?;
    }
    let code = match &args.script {
        Some(path) => {
            let file =
                fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            session.repl(
                BufReader::new(file),
                &mut out,
                ReplMode {
                    echo: true,
                    script: true,
                },
            )?
        }
        None => {
            let stdin = io::stdin();
            let echo = !stdin.is_terminal();
            session.repl(
                stdin.lock(),
                &mut out,
                ReplMode {
                    echo,
                    script: false,
                },
            )?
        }
    };
    Ok(ExitCode::from(code as u8))
}
