use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use topogate::cli::{cmd_filter_study, cmd_gen, cmd_quality, cmd_robustness, cmd_run, exit_code, RunConfig};
use topogate::quality::QualityConfig;
use topogate::Result;

#[derive(Parser)]
#[command(name = "topogate", version, about = "Quality-gated new-lesion prediction on paired CT ROIs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort and write it as NIfTI triples plus a manifest.
    Gen {
        #[arg(long)]
        config: PathBuf,
    },
    /// Cross-validate all variants and write report.csv/json and predictions.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare the gated model on the full cohort with the quality-filtered subset.
    FilterStudy {
        #[arg(long)]
        config: PathBuf,
    },
    /// Noise sweep of gate weight and quality scores with a frozen model.
    Robustness {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to use; trained and written here if it does not exist.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Per-case quality scores for a cohort directory.
    Quality {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional run config supplying quality settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config } => {
            let dir = cmd_gen(&RunConfig::load(&config)?)?;
            eprintln!("cohort written to {}", dir.display());
        }
        Command::Run { config } => {
            cmd_run(&RunConfig::load(&config)?)?;
        }
        Command::FilterStudy { config } => {
            cmd_filter_study(&RunConfig::load(&config)?)?;
        }
        Command::Robustness { config, model } => {
            cmd_robustness(&RunConfig::load(&config)?, model.as_deref())?;
        }
        Command::Quality { input, out, config } => {
            let (qcfg, calibrate) = match config {
                Some(path) => {
                    let cfg = RunConfig::load(&path)?;
                    (cfg.quality, cfg.calibrate_quality)
                }
                None => (QualityConfig::default(), true),
            };
            let rows = cmd_quality(&input, &out, &qcfg, calibrate)?;
            eprintln!("{} cases scored", rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let result = run(Cli::parse());
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code(&result) as u8)
}
