//! `pmrn` — analyze, train, run and inspect PMRN super-resolution models.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation or expectation
//! failure, 3 runtime error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{AnalyzeArgs, DumpArgs, EvalArgs, GradcheckArgs, SrArgs, TrainCmdArgs};

#[derive(Parser, Debug)]
#[command(name = "pmrn", version, about = "PMRN single-image super-resolution")]
struct Cli {
    /// TOML file with [model], [train], [analysis] and [metrics] sections
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice made by the command
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Count parameters, MACs and receptive fields
    Analyze(AnalyzeArgs),
    /// Train with L1 loss and Adam
    Train(TrainCmdArgs),
    /// Super-resolve images with trained weights
    Sr(SrArgs),
    /// PSNR/SSIM of a model or baseline on a directory of HR images
    Eval(EvalArgs),
    /// Finite-difference gradient verification
    Gradcheck(GradcheckArgs),
    /// Write intermediate multi-scale features and attention maps as images
    DumpFeatures(DumpArgs),
}

/// Errors that map onto a specific exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Validation(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Validation(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(f) = err.downcast_ref::<Failure>() {
        return match f {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Validation(_) => EXIT_VALIDATION,
        };
    }
    match err.downcast_ref::<pmrn::Error>() {
        Some(
            pmrn::Error::Config(_)
            | pmrn::Error::InvalidArgument { .. }
            | pmrn::Error::Shape { .. }
            | pmrn::Error::ParamMismatch { .. },
        ) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("PMRN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("PMRN_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    let file = config::ConfigFile::load(cli.config.as_deref())?;
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    match cli.command {
        Command::Analyze(a) => commands::analyze(&a, &file),
        Command::Train(a) => commands::train(&a, &file, seed),
        Command::Sr(a) => commands::sr(&a, &file, seed),
        Command::Eval(a) => commands::eval(&a, &file, seed),
        Command::Gradcheck(a) => commands::gradcheck(&a, &file, seed),
        Command::DumpFeatures(a) => commands::dump_features(&a, &file, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&Failure::Usage("x".into()).into()), EXIT_USAGE);
        assert_eq!(exit_code(&Failure::Validation("x".into()).into()), EXIT_VALIDATION);
        assert_eq!(exit_code(&pmrn::Error::Config("x".into()).into()), EXIT_VALIDATION);
        let io = pmrn::Error::Io(std::io::Error::other("disk"));
        assert_eq!(exit_code(&io.into()), EXIT_RUNTIME);
        let nf = pmrn::Error::NonFiniteLoss { step: 3, loss: f64::NAN };
        assert_eq!(exit_code(&nf.into()), EXIT_RUNTIME);
    }
}
