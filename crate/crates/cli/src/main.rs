use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

/// Multivariate spatio-temporal mixed effects models for areal data.
#[derive(Debug, Parser)]
#[command(name = "mstm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model; writes draws, run metadata and diagnostics.
    Fit { config: PathBuf },
    /// Posterior predictions (and contrasts) from a fit directory.
    Predict { fit_dir: PathBuf },
    /// Convergence diagnostics from a fit directory.
    Diagnostics { fit_dir: PathBuf },
    /// Replicated simulate, perturb, mask, fit and score study.
    Study { config: PathBuf },
    /// Simulate a data set from a study configuration.
    Simulate { config: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Fit { config } => commands::fit(config),
        Command::Predict { fit_dir } => commands::predict(fit_dir),
        Command::Diagnostics { fit_dir } => commands::diagnostics(fit_dir),
        Command::Study { config } => commands::study(config),
        Command::Simulate { config } => commands::simulate(config),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            let report = serde_json::json!({
                "error": {
                    "kind": e.kind(),
                    "message": e.to_string(),
                    "path": e.path().map(|p| p.display().to_string()),
                }
            });
            eprintln!("{report}");
            ExitCode::from(2)
        }
    }
}
