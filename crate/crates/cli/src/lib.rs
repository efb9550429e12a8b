//! Experiment orchestration for generative unadversarial adaptation:
//! data generation, source training, online adaptation, sweeps, saliency
//! export and self-verification.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod svg;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::ExperimentConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "gues", version, about = "Generative unadversarial examples for online domain adaptation")]
pub struct Cli {
    /// JSON config; unset keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Overrides the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes source and shifted target images plus manifest.csv.
    GenData,
    /// Trains the source classifier and reports in-domain scores.
    TrainSource {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Streams the target set once through the selected mode.
    Adapt {
        /// source_only, gues, tent, shot_im, gues+tent or gues+shot_im.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Runs a grid of adaptations: batch sizes or alpha x beta.
    Sweep {
        #[arg(long, default_value = "batch")]
        axis: String,
        /// Generator mode for the alpha_beta axis.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Writes the saliency map of a PPM/PGM image as PGM.
    Saliency { input: PathBuf, output: PathBuf },
    /// Runs the built-in checks and prints one line per check.
    Verify,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    Ok(config)
}

/// Executes a parsed command line and returns the lines to print.
pub fn run(cli: Cli) -> Result<Vec<String>> {
    let mut config = load_config(&cli)?;
    let lines = match cli.command {
        Command::GenData => {
            config.validate()?;
            let manifest = commands::cmd_gen_data(&config)?;
            vec![format!("wrote {}", manifest.display())]
        }
        Command::TrainSource { epochs } => {
            if let Some(e) = epochs {
                config.epochs = e;
            }
            config.validate()?;
            let out = commands::cmd_train_source(&config)?;
            vec![
                format!("wrote {}", commands::classifier_path(&config).display()),
                format!(
                    "heldout acc {:.4} qwk {} | target acc {:.4} qwk {}",
                    out.heldout.acc,
                    gues_core::pipeline::fmt_opt(out.heldout.qwk),
                    out.target.acc,
                    gues_core::pipeline::fmt_opt(out.target.qwk)
                ),
            ]
        }
        Command::Adapt { mode } => {
            if let Some(m) = mode {
                config::parse_mode(&m)?;
                config.mode = m;
            }
            config.validate()?;
            let (dir, s) = commands::cmd_adapt(&config)?;
            vec![
                format!("wrote {}", dir.display()),
                format!(
                    "{} acc {:.4} qwk {} avg {}",
                    config.mode,
                    s.acc,
                    gues_core::pipeline::fmt_opt(s.qwk),
                    gues_core::pipeline::fmt_opt(s.avg())
                ),
            ]
        }
        Command::Sweep { axis, mode } => {
            let axis = commands::SweepAxis::parse(&axis)?;
            if let Some(m) = mode {
                config::parse_mode(&m)?;
                config.mode = m;
            }
            config.validate()?;
            let mut lines = commands::cmd_sweep(&config, axis)?;
            lines.insert(0, format!("wrote {}", commands::sweep_dir(&config).display()));
            lines
        }
        Command::Saliency { input, output } => {
            commands::cmd_saliency(&input, &output)?;
            vec![format!("wrote {}", output.display())]
        }
        Command::Verify => {
            let report = commands::cmd_verify();
            let text = report.to_text();
            if !report.passed() {
                print!("{text}");
                let names: Vec<&str> = report.failed().map(|c| c.name).collect();
                return Err(CliError::Verification(names.join(", ")));
            }
            text.lines().map(String::from).collect()
        }
    };
    Ok(lines)
}
