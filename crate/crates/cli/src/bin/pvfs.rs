//! Container packer.

use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use pinky_core::vfs;

#[derive(Parser)]
#[command(version, about = "Pack, unpack and list file system containers")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pack a directory tree into an image.
    Pack { dir: PathBuf, image: PathBuf },
    /// Extract an image into a directory.
    Unpack { image: PathBuf, dir: PathBuf },
    /// List the entries of an image.
    Ls { image: PathBuf },
}

fn read(path: &PathBuf) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn main() -> Result<()> {
    match Args::parse().cmd {
        Cmd::Pack { dir, image } => {
            let bytes =
                vfs::pack_dir(&dir).with_context(|| format!("packing {}", dir.display()))?;
            fs::write(&image, bytes).with_context(|| format!("writing {}", image.display()))?;
        }
        Cmd::Unpack { image, dir } => vfs::unpack(&read(&image)?, &dir)?,
        Cmd::Ls { image } => {
            for line in vfs::list(&read(&image)?)? {
                println!("{line}");
            }
        }
    }
    Ok(())
}
