//! Command line front end: train protection artifacts, encrypt images,
//! score labeled folders, and run the ablation studies. Every experiment
//! knob lives in a JSON config; flags only pick files and overrides.

mod ablate;
mod artifacts;
mod detect;
mod encrypt;
mod plots;
mod runspec;
mod train;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Environment variable naming the directory all relative output paths
/// resolve against. Unset means paths are taken as given.
pub const OUT_ROOT_ENV: &str = "IMPRINT_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "imprint",
    version,
    about = "Additive noise-template protection: train, encrypt, detect, ablate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a template set and recovery encoder from a JSON run config.
    Train(train::TrainArgs),
    /// Add a template plane to images and export 8-bit PNGs plus a manifest.
    Encrypt(encrypt::EncryptArgs),
    /// Score a folder of real/ and fake/ images against trained artifacts.
    Detect(detect::DetectArgs),
    /// Run one named ablation study end to end.
    Ablate(ablate::AblateArgs),
}

/// Failures split by exit code: bad invocations and configs exit 1, runs
/// that started and then failed exit 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

pub type CmdResult = Result<(), CliError>;

impl From<imprint_core::Error> for CliError {
    fn from(e: imprint_core::Error) -> Self {
        match e {
            imprint_core::Error::Config(_) | imprint_core::Error::Argument { .. } => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

/// Resolves an output path against [`OUT_ROOT_ENV`] when the variable is
/// set and the path is relative.
pub fn resolve_out(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Creates the resolved output directory and hands it back.
pub fn prepare_out_dir(path: &Path) -> Result<PathBuf, CliError> {
    let dir = resolve_out(path);
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help and version print to stdout and are not failures.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(args) => train::run(args),
        Command::Encrypt(args) => encrypt::run(args),
        Command::Detect(args) => detect::run(args),
        Command::Ablate(args) => ablate::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
