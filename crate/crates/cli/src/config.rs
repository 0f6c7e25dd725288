//! Layered run configuration: built-in defaults, then an optional JSON file,
//! then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use semflow_core::eval::EvalConfig;
use semflow_core::features::{ExtractorConfig, ToyExtractor};
use semflow_core::train::load_checkpoint;
use semflow_core::{ArgmaxMode, Error, MatchConfig, Matcher};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(value)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_file(path, text.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Settings shared by `match`, `eval` and `sweep`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchRunConfig {
    pub matching: MatchConfig,
    pub extractor: ExtractorConfig,
    pub checkpoint: Option<PathBuf>,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Default, Args)]
pub struct MatchFlags {
    /// JSON file with `matching`, `extractor`, `checkpoint` and `eval`
    /// sections; flags override it [default: none]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Softmax temperature beta [default: 50]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Gaussian kernel standard deviation, in grid cells [default: 5]
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Argmax variant: discrete, soft or kernel_soft [default: kernel_soft]
    #[arg(long)]
    pub mode: Option<ArgmaxMode>,
    /// Checkpoint directory with trained adaptation layers [default: none]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Seed of the frozen toy extractor [default: 7]
    #[arg(long)]
    pub extractor_seed: Option<u64>,
    /// Working grid size, rows and columns [default: 20]
    #[arg(long)]
    pub grid: Option<usize>,
}

impl MatchFlags {
    pub fn resolve(&self) -> Result<MatchRunConfig> {
        let mut cfg: MatchRunConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => MatchRunConfig::default(),
        };
        if let Some(b) = self.beta {
            cfg.matching.beta = b;
        }
        if let Some(s) = self.sigma {
            cfg.matching.sigma = s;
        }
        if let Some(m) = self.mode {
            cfg.matching.mode = m;
        }
        if let Some(c) = &self.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        if let Some(s) = self.extractor_seed {
            cfg.extractor.seed = s;
        }
        if let Some(g) = self.grid {
            cfg.extractor.grid_h = g;
            cfg.extractor.grid_w = g;
        }
        cfg.matching.validate()?;
        cfg.eval.validate()?;
        Ok(cfg)
    }
}

impl MatchRunConfig {
    /// The extractor comes from the checkpoint index when a checkpoint is
    /// given.
    pub fn matcher(&self) -> Result<Matcher> {
        let (model, extractor) = match &self.checkpoint {
            Some(dir) => {
                let (state, ext) = load_checkpoint(dir)?;
                (Some(state.model), ext)
            }
            None => (None, self.extractor),
        };
        Ok(Matcher::new(ToyExtractor::new(extractor)?, model, self.matching)?)
    }
}
