use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use selfdistill::experiment::{self, ExperimentConfig};
use selfdistill::Error;

#[derive(Parser)]
#[command(name = "selfdistill", version, about = "Closed-form and oracle experiments for multi-round self-distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-round outputs, simplex projection, operator spectra and dispersion.
    Trajectory(Common),
    /// Accuracy over a sweep of corruption rates (needs sweep.eta).
    Phase(Common),
    /// Softmax-linearisation error over a sweep of n (needs sweep.n and the oracle mode).
    ApproxError(Common),
    /// Theory constants, minimal rounds and condition verdicts as JSON.
    Theory(Common),
    /// Correlation statistics and suggested λ for exported features.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// CSV of feature rows, last column the integer label.
        #[arg(long)]
        features: Option<PathBuf>,
        /// CSV of class_index,superclass_index pairs.
        #[arg(long)]
        superclasses: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults to the K=4, n=100 setup.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides output_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config leaf, e.g. --set corruption.eta=0.3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> selfdistill::Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let out = self.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        Ok((cfg, out))
    }
}

fn run(cli: Cli) -> selfdistill::Result<Vec<PathBuf>> {
    match cli.command {
        Command::Trajectory(c) => c.load().and_then(|(cfg, out)| experiment::cmd_trajectory(&cfg, &out)),
        Command::Phase(c) => c.load().and_then(|(cfg, out)| experiment::cmd_phase(&cfg, &out)),
        Command::ApproxError(c) => c.load().and_then(|(cfg, out)| experiment::cmd_approx_error(&cfg, &out)),
        Command::Theory(c) => c.load().and_then(|(cfg, out)| experiment::cmd_theory(&cfg, &out)),
        Command::Ingest { common, features, superclasses } => {
            let (cfg, out) = common.load()?;
            let spec = cfg.ingest.unwrap_or_default();
            let features = features
                .or(spec.features_path)
                .ok_or_else(|| Error::Invalid("ingest needs --features or ingest.features_path".into()))?;
            let superclasses = superclasses.or(spec.superclass_path);
            experiment::cmd_ingest(&features, superclasses.as_deref(), &out).map(|(_, w)| w)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
