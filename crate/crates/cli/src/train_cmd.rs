use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use semflow_core::train::{initial_state, load_checkpoint, save_checkpoint, train_from, EpochStats};
use semflow_core::{ArgmaxMode, Error, Image, LossWeights, Mask, MatchConfig, TrainerConfig};

use crate::config::{read_json, write_file};

/// One corpus entry; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
}

pub fn load_corpus(manifest: &Path) -> Result<Vec<(Image, Mask)>> {
    let entries: Vec<ManifestEntry> = read_json(manifest)?;
    if entries.is_empty() {
        bail!(Error::Invalid(format!("{}: empty corpus manifest", manifest.display())));
    }
    let base = manifest.parent().unwrap_or(Path::new(""));
    entries
        .iter()
        .map(|e| {
            let img = Image::load(&base.join(&e.image))?;
            let mask = Mask::load(&base.join(&e.mask))?;
            if mask.dims() != (img.h(), img.w()) {
                bail!(Error::Shape(format!(
                    "{}: mask {:?} does not match image {}x{}",
                    e.mask.display(),
                    mask.dims(),
                    img.h(),
                    img.w()
                )));
            }
            Ok((img, mask))
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub trainer: TrainerConfig,
    pub loss: LossWeights,
    pub matching: MatchConfig,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus manifest: JSON list of {"image": path, "mask": path}
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint directory to write
    #[arg(long)]
    pub out: PathBuf,
    /// Loss-history CSV to write
    #[arg(long)]
    pub history: PathBuf,
    /// JSON file with `trainer`, `loss` and `matching` sections [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from this checkpoint directory (weights, Adam state, epoch) [default: none]
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total number of epochs [default: 40]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Pairs per Adam step [default: 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate [default: 3e-5]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epoch after which the learning rate is divided [default: 30]
    #[arg(long)]
    pub lr_drop_epoch: Option<usize>,
    /// Learning-rate divisor [default: 5]
    #[arg(long)]
    pub lr_drop_factor: Option<f64>,
    /// Synthetic pairs per corpus image per epoch [default: 1]
    #[arg(long)]
    pub pairs_per_image: Option<usize>,
    /// Random seed for pair sampling and initialization [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable horizontal-flip augmentation [default: flips on]
    #[arg(long)]
    pub no_flip: bool,
    /// Mask consistency weight [default: 3]
    #[arg(long)]
    pub lambda_mask: Option<f64>,
    /// Flow consistency weight [default: 16]
    #[arg(long)]
    pub lambda_flow: Option<f64>,
    /// Smoothness weight [default: 0.5]
    #[arg(long)]
    pub lambda_smooth: Option<f64>,
    /// Softmax temperature beta [default: 50]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Gaussian kernel standard deviation, in grid cells [default: 5]
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Argmax variant used in training: soft or kernel_soft [default: kernel_soft]
    #[arg(long)]
    pub mode: Option<ArgmaxMode>,
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<TrainRunConfig> {
        let mut cfg: TrainRunConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => TrainRunConfig::default(),
        };
        let t = &mut cfg.trainer;
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src {
                    $dst = v;
                }
            };
        }
        set!(t.epochs, self.epochs);
        set!(t.batch_size, self.batch_size);
        set!(t.lr, self.lr);
        set!(t.lr_drop_epoch, self.lr_drop_epoch);
        set!(t.lr_drop_factor, self.lr_drop_factor);
        set!(t.pairs_per_image, self.pairs_per_image);
        set!(t.seed, self.seed);
        if self.no_flip {
            t.flip = false;
        }
        set!(cfg.loss.lambda_mask, self.lambda_mask);
        set!(cfg.loss.lambda_flow, self.lambda_flow);
        set!(cfg.loss.lambda_smooth, self.lambda_smooth);
        set!(cfg.matching.beta, self.beta);
        set!(cfg.matching.sigma, self.sigma);
        set!(cfg.matching.mode, self.mode);
        cfg.trainer.validate()?;
        cfg.loss.validate()?;
        cfg.matching.validate()?;
        Ok(cfg)
    }
}

fn history_csv(rows: &[EpochStats]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "lr", "loss", "mask_term", "flow_term", "smooth_term"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.mean.total.to_string(),
            r.mean.mask_term.to_string(),
            r.mean.flow_term.to_string(),
            r.mean.smooth_term.to_string(),
        ])?;
    }
    w.into_inner().context("flushing history CSV")
}

pub fn run(a: TrainArgs) -> Result<u8> {
    let cfg = a.resolve()?;
    let corpus = load_corpus(&a.corpus)?;
    let state = match &a.resume {
        Some(dir) => {
            let (state, ext) = load_checkpoint(dir)?;
            if ext != cfg.trainer.extractor {
                bail!(Error::Invalid(format!("{}: checkpoint was trained with another extractor", dir.display())));
            }
            state
        }
        None => initial_state(&cfg.trainer)?,
    };
    log::info!("training on {} images from epoch {}", corpus.len(), state.epoch);
    let out = match train_from(&corpus, &cfg.trainer, &cfg.loss, &cfg.matching, state, |_| {}) {
        Ok(out) => out,
        Err(Error::Numeric(msg)) => {
            let dump = a.out.join("nan_diagnostics.txt");
            write_file(&dump, msg.as_bytes())?;
            bail!(Error::Numeric(format!("{msg} (state written to {})", dump.display())));
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&a.out, &out.state, &cfg.trainer.extractor, true)?;
    write_file(&a.history, &history_csv(&out.history)?)?;
    Ok(0)
}
