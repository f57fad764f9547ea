//! `calibra`: generate data, train the source classifier and calibrator,
//! evaluate, sweep the perturbation budget and inspect spectra.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "calibra", version, about = "Frozen-classifier domain adaptation with a data calibrator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (key = value lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render source/target training and evaluation sets.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train and freeze the source classifier.
    TrainSource {
        #[command(flatten)]
        common: Common,
        /// Directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a calibrator against a frozen classifier.
    TrainCalibrator {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        source_ckpt: PathBuf,
        /// Overrides calibrator.epsilon.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Source/target trade-off report and confusion matrices.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        source_ckpt: PathBuf,
        /// Without one, an identity calibrator is used.
        #[arg(long)]
        calibrator_ckpt: Option<PathBuf>,
        /// Overrides the budget stored in the calibrator checkpoint.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// One calibration run per budget.
    Lsweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        source_ckpt: PathBuf,
        /// Comma-separated budgets, e.g. 0,0.01,0.05,0.2,0.5.
        #[arg(long, value_delimiter = ',', required = true)]
        epsilons: Vec<f64>,
    },
    /// High-frequency energy of target images before and after calibration.
    Fft {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        calibrator_ckpt: PathBuf,
        #[arg(long)]
        epsilon: Option<f64>,
        /// Low-pass radius as a fraction of min(H, W).
        #[arg(long, default_value_t = calibra_core::eval::DEFAULT_CUTOFF)]
        cutoff: f64,
        /// Number of evaluation images to analyse.
        #[arg(long, default_value_t = 64)]
        count: usize,
    },
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("CALIBRA_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("CALIBRA_THREADS must be a positive integer, got '{v}'"))?;
        if n == 0 {
            anyhow::bail!("CALIBRA_THREADS must be a positive integer, got '{v}'");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| commands::run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
