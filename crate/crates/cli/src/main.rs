//! `lps-lab <command> --config <path> [--seed N] [--out <dir>] [--re-verify <witness.json>]`

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use lps_lab::LabError;

use crate::config::{CommandName, ExperimentConfig};

/// A failure with its exit code and a one-line diagnostic.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        CliError::usage(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "lps-lab", version, about = "Numerical checks of Littlewood-Paley-Stein and multiplicative Riesz inequalities")]
struct Cli {
    command: CommandName,
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config's `out`, else `lps-lab-out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Recompute the values recorded in a witness file instead of running.
    #[arg(long = "re-verify", value_name = "WITNESS")]
    re_verify: Option<PathBuf>,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("LPS_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("invalid LPS_LAB_THREADS: {raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("LPS_LAB_THREADS: {e}")))
}

fn execute(cli: Cli) -> Result<bool, CliError> {
    configure_threads()?;
    let (outcome, out_dir) = match (&cli.re_verify, &cli.config) {
        (Some(w), _) => (
            commands::reverify(w, cli.command)?,
            cli.out.clone().unwrap_or_else(|| PathBuf::from("lps-lab-out")),
        ),
        (None, None) => return Err(CliError::usage("invalid config: --config is required")),
        (None, Some(path)) => {
            let (cfg, base) = ExperimentConfig::load(path)?;
            if let Some(c) = cfg.command {
                if c != cli.command {
                    return Err(CliError::usage(format!(
                        "invalid command: config is for {c}, invoked as {}",
                        cli.command
                    )));
                }
            }
            let out_dir = cli
                .out
                .clone()
                .or_else(|| cfg.out.as_ref().map(|o| base.join(o)))
                .unwrap_or_else(|| PathBuf::from("lps-lab-out"));
            (commands::run(&cfg, &base, cli.command, cli.seed)?, out_dir)
        }
    };
    for (name, bytes) in &outcome.files {
        let path = output::write_atomic(&out_dir, name, bytes)?;
        println!("wrote {}", path.display());
    }
    for line in &outcome.summary {
        println!("{line}");
    }
    Ok(!outcome.failed)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
