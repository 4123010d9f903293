//! Command-line entry points.

mod data;
mod inspect;
mod train;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use data::{crop, crop_targets, load_dataset, sample_crops, Dataset};
pub use inspect::{diagonal_means, run_attention, run_cfr, run_mask_stats, AttentionReport, CfrReport};
pub use train::{run_evaluate, run_finetune, run_pretrain, FINETUNE_CKPT, FINETUNE_LOG, PRETRAIN_CKPT, PRETRAIN_LOG};

use crate::config::Settings;
use crate::error::{Error, Result};
use crate::synth::{generate, SynthSpec};

/// Environment variable holding the number of data-loading threads.
pub const WORKERS_ENV: &str = "A2V_WORKERS";

/// Everything a run needs besides its subcommand-specific inputs.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub settings: Settings,
    pub out: PathBuf,
    pub seed: u64,
    pub fold: usize,
    pub labels_fraction: f64,
    /// Pretrained checkpoint to finetune from.
    pub init: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Data-loading threads; 0 loads on the calling thread.
    pub workers: usize,
}

impl RunOptions {
    pub fn new(settings: Settings, out: impl Into<PathBuf>, seed: u64) -> Self {
        RunOptions {
            settings,
            out: out.into(),
            seed,
            fold: 0,
            labels_fraction: 1.0,
            init: None,
            resume: None,
            workers: 0,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "sincdistill", version, about = "Self-supervised pretraining and event detection for bioacoustic recordings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fold held out for evaluation.
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// Stratified fraction of training clips used for finetuning.
    #[arg(long, default_value_t = 1.0)]
    pub labels_fraction: f64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Self-supervised teacher-student pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Supervised finetuning with a framewise head.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint; random initialization when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Event-level metrics of a finetuned checkpoint on the held-out fold.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Masked-fraction and span statistics of the mask sampler.
    MaskStats {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1_000_000)]
        frames: usize,
    },
    /// Filterbank frequency response against its Mel initialization.
    Cfr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 800.0)]
        band_lo: f64,
        #[arg(long, default_value_t = 1200.0)]
        band_hi: f64,
    },
    /// Attention maps on held-out clips.
    Attention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        clips: usize,
    },
    /// Writes a synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        clips: usize,
        #[arg(long, default_value_t = 5.0)]
        clip_s: f64,
    },
}

pub fn workers_from_env() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{WORKERS_ENV} = `{v}` is not a count"))),
        Err(_) => Ok(0),
    }
}

fn options(common: Common) -> Result<RunOptions> {
    let settings = match &common.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    if !(common.labels_fraction > 0.0 && common.labels_fraction <= 1.0) {
        return Err(Error::arg("labels-fraction", format!("{} not in (0, 1]", common.labels_fraction)));
    }
    Ok(RunOptions {
        settings,
        out: common.out,
        seed: common.seed,
        fold: common.fold,
        labels_fraction: common.labels_fraction,
        init: None,
        resume: None,
        workers: workers_from_env()?,
    })
}

/// Runs one parsed command and returns a one-line summary.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Pretrain { common, resume } => {
            let opts = RunOptions {
                resume,
                ..options(common)?
            };
            let stats = run_pretrain(&opts)?;
            let last = stats.last().map(|s| s.loss).unwrap_or(f64::NAN);
            Ok(format!("pretrained {} steps, final loss {last:.6}", stats.len()))
        }
        Command::Finetune { common, init, resume } => {
            let opts = RunOptions {
                init,
                resume,
                ..options(common)?
            };
            let stats = run_finetune(&opts)?;
            let last = stats.last().map(|s| s.loss).unwrap_or(f64::NAN);
            Ok(format!("finetuned {} steps, final loss {last:.6}", stats.len()))
        }
        Command::Evaluate { common, checkpoint } => {
            let r = run_evaluate(&options(common)?, &checkpoint)?;
            Ok(format!("micro AP {:.4}, macro AP {:.4}", r.micro_ap, r.macro_ap))
        }
        Command::MaskStats { common, frames } => {
            let s = run_mask_stats(&options(common)?, frames)?;
            Ok(format!(
                "coverage={} mode_ms={} union_coverage={}",
                s.coverage, s.mode_ms, s.union_coverage
            ))
        }
        Command::Cfr {
            common,
            checkpoint,
            band_lo,
            band_hi,
        } => {
            let r = run_cfr(&options(common)?, &checkpoint, (band_lo, band_hi))?;
            Ok(format!(
                "CFR mass {band_lo}-{band_hi} Hz: mel {:.4}, trained {:.4}",
                r.mel_mass, r.trained_mass
            ))
        }
        Command::Attention {
            common,
            checkpoint,
            clips,
        } => {
            let r = run_attention(&options(common)?, &checkpoint, clips)?;
            Ok(format!(
                "{} maps, max row-sum error {:.2e}, diagonal {:.4} vs off-diagonal {:.4}",
                r.maps, r.max_row_sum_error, r.mean_diagonal, r.mean_off_diagonal
            ))
        }
        Command::Synth {
            out,
            seed,
            clips,
            clip_s,
        } => {
            let spec = SynthSpec {
                n_clips: clips,
                clip_s,
                seed,
                ..SynthSpec::default()
            };
            for w in generate(&spec, &out)? {
                eprintln!("warning: {w}");
            }
            Ok(format!("wrote {clips} clips to {}", out.display()))
        }
    }
}
