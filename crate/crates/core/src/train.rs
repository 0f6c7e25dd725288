//! Desk-scale training of the adaptation layers on synthetic pairs, and
//! checkpoint I/O.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::features::{adapt_graph, AdaptationLayer, ExtractorConfig, ToyExtractor};
use crate::formats;
use crate::image::{Image, Mask};
use crate::losses::{loss_nodes, LossMasks, LossReport, LossWeights};
use crate::matching::{graph as match_graph, ArgmaxMode, MatchConfig};
use crate::optim::{adam_step, AdamState};
use crate::synth::{augment_flip, generate_pair, item_seed, AffineRanges, SynthPair};

pub const FINE_KERNEL: usize = 5;
pub const COARSE_KERNEL: usize = 3;

/// Adaptation layers for the fine and coarse feature levels.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub fine: AdaptationLayer,
    pub coarse: AdaptationLayer,
}

const PARAM_NAMES: [&str; 8] = [
    "fine.conv1.weight",
    "fine.conv1.bias",
    "fine.conv2.weight",
    "fine.conv2.bias",
    "coarse.conv1.weight",
    "coarse.conv1.bias",
    "coarse.conv2.weight",
    "coarse.conv2.bias",
];

impl Model {
    /// Both layers zero, so adapted features equal the input features.
    pub fn identity(channels: usize) -> Result<Self> {
        Ok(Self {
            fine: AdaptationLayer::zeros(channels, FINE_KERNEL)?,
            coarse: AdaptationLayer::zeros(channels, COARSE_KERNEL)?,
        })
    }

    /// Random first convolutions and zero second convolutions: the model
    /// starts as the identity but every parameter receives gradient after
    /// the first update.
    pub fn init(channels: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |k| -> Result<AdaptationLayer> {
            let mut l = AdaptationLayer::random(channels, k, scale, &mut rng)?;
            for p in l.params_mut().into_iter().skip(2) {
                p.data_mut().fill(0.0);
            }
            Ok(l)
        };
        Ok(Self { fine: layer(FINE_KERNEL)?, coarse: layer(COARSE_KERNEL)? })
    }

    pub fn channels(&self) -> usize {
        self.fine.channels()
    }

    pub fn check_extractor(&self, e: &ToyExtractor) -> Result<()> {
        if self.fine.channels() != e.config().channels || self.coarse.channels() != e.config().channels {
            return Err(shape_err!(
                "model has {} channels, extractor produces {}",
                self.fine.channels(),
                e.config().channels
            ));
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.fine.params().into_iter().chain(self.coarse.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let Model { fine, coarse } = self;
        fine.params_mut().into_iter().chain(coarse.params_mut()).collect()
    }

    pub fn param_names() -> &'static [&'static str] {
        &PARAM_NAMES
    }

    pub fn param_norm(&self) -> f64 {
        self.params().iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Trainer settings. Unknown keys are rejected when read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    pub affine_ranges: AffineRanges,
    /// Synthetic pairs drawn from each corpus image per epoch.
    pub pairs_per_image: usize,
    /// Mirror each pair left-right with probability one half.
    pub flip: bool,
    /// Scale of the first-convolution initialization.
    pub init_scale: f64,
    pub extractor: ExtractorConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 40,
            lr: 3e-5,
            lr_drop_epoch: 30,
            lr_drop_factor: 5.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            seed: 0,
            affine_ranges: AffineRanges::default(),
            pairs_per_image: 1,
            flip: true,
            init_scale: 0.5,
            extractor: ExtractorConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.pairs_per_image == 0 {
            return Err(Error::Invalid("batch_size and pairs_per_image must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor.is_finite()) {
            return Err(Error::Invalid("lr_drop_factor must be positive".into()));
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Invalid(format!("Adam betas must lie in [0, 1), got {b}")));
            }
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Invalid("init_scale must be >= 0".into()));
        }
        self.affine_ranges.validate()
    }

    /// Learning rate for a zero-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr / self.lr_drop_factor
        } else {
            self.lr
        }
    }
}

/// Mean loss terms of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub mean: LossReport,
}

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<EpochStats>,
}

impl TrainOutcome {
    pub fn model(&self) -> &Model {
        &self.state.model
    }
}

/// Loss and parameter gradients of one pair.
#[derive(Debug, Clone)]
pub struct ItemResult {
    pub report: LossReport,
    pub grads: Vec<Tensor>,
}

fn feature_nodes(g: &mut Graph, e: &ToyExtractor, img: &Image, fine: &[Var; 4], coarse: &[Var; 4]) -> Result<Vec<Var>> {
    let levels = e.extract_levels(img)?;
    let f = g.constant(levels.fine.to_tensor());
    let c = g.constant(levels.coarse.to_tensor());
    let fa = adapt_graph(g, f, fine)?;
    let ca = adapt_graph(g, c, coarse)?;
    let up = g.resize_bilinear(ca, levels.fine.h(), levels.fine.w())?;
    Ok(vec![fa, up])
}

/// Forward and backward pass for one synthetic pair.
pub fn pair_gradients(
    model: &Model,
    e: &ToyExtractor,
    pair: &SynthPair,
    weights: &LossWeights,
    mcfg: &MatchConfig,
) -> Result<ItemResult> {
    let mut g = Graph::new();
    let fine = model.fine.leaves(&mut g);
    let coarse = model.coarse.leaves(&mut g);
    let fs = feature_nodes(&mut g, e, &pair.src, &fine, &coarse)?;
    let ft = feature_nodes(&mut g, e, &pair.tgt, &fine, &coarse)?;
    let (flow_s, flow_t) = match_graph::flows(&mut g, &fs, &ft, mcfg)?;
    let (ms, mt) = pair.grid_masks();
    let nodes = loss_nodes(&mut g, flow_s, flow_t, &LossMasks::new(&ms, &mt))?;
    let total = nodes.total(&mut g, weights);
    let report = nodes.report(&g, weights);
    g.backward(total)?;
    let grads = fine.iter().chain(&coarse).map(|&v| g.grad(v)).collect();
    Ok(ItemResult { report, grads })
}

/// The pairs of one epoch, in batch order.
pub fn epoch_pairs(corpus: &[(Image, Mask)], cfg: &TrainerConfig, epoch: usize) -> Result<Vec<SynthPair>> {
    let mut order: Vec<(usize, usize)> =
        (0..corpus.len()).flat_map(|i| (0..cfg.pairs_per_image).map(move |k| (i, k))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, epoch as u64));
    order.shuffle(&mut rng);
    let grid = (cfg.extractor.grid_h, cfg.extractor.grid_w);
    order
        .par_iter()
        .map(|&(i, k)| {
            let s = item_seed(cfg.seed ^ 0xA5A5, ((epoch * corpus.len() + i) * cfg.pairs_per_image + k) as u64);
            let (img, mask) = &corpus[i];
            let pair = generate_pair(img, mask, s, &cfg.affine_ranges, grid)?;
            let flip = cfg.flip && ChaCha8Rng::seed_from_u64(s ^ 0xF11F).gen_bool(0.5);
            Ok(if flip { augment_flip(&pair) } else { pair })
        })
        .collect()
}

fn diagnostics(epoch: usize, step: usize, model: &Model, items: &[ItemResult]) -> String {
    let losses: Vec<String> = items.iter().map(|r| format!("{:?}", r.report)).collect();
    let norms: Vec<String> = model
        .params()
        .iter()
        .zip(PARAM_NAMES)
        .map(|(t, n)| format!("{n}={:.6e}", t.data().iter().map(|v| v * v).sum::<f64>().sqrt()))
        .collect();
    format!(
        "non-finite loss or gradient at epoch {epoch}, step {step}; parameter norms [{}]; batch losses [{}]",
        norms.join(", "),
        losses.join("; ")
    )
}

/// Fresh training state for `cfg`.
pub fn initial_state(cfg: &TrainerConfig) -> Result<TrainState> {
    let model = Model::init(cfg.extractor.channels, cfg.init_scale, item_seed(cfg.seed, u64::MAX))?;
    let adam = AdamState::for_params(&model.params(), cfg.adam_beta1, cfg.adam_beta2);
    Ok(TrainState { model, adam, epoch: 0 })
}

pub fn train(
    corpus: &[(Image, Mask)],
    cfg: &TrainerConfig,
    weights: &LossWeights,
    mcfg: &MatchConfig,
) -> Result<TrainOutcome> {
    train_from(corpus, cfg, weights, mcfg, initial_state(cfg)?, |_| {})
}

/// Continues training from `state` until `cfg.epochs` epochs are complete,
/// calling `on_epoch` after each one.
pub fn train_from(
    corpus: &[(Image, Mask)],
    cfg: &TrainerConfig,
    weights: &LossWeights,
    mcfg: &MatchConfig,
    mut state: TrainState,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    weights.validate()?;
    mcfg.validate()?;
    if mcfg.mode == ArgmaxMode::Discrete {
        return Err(Error::Invalid("training needs the soft or kernel_soft argmax".into()));
    }
    if corpus.is_empty() {
        return Err(Error::Invalid("empty training corpus".into()));
    }
    let extractor = ToyExtractor::new(cfg.extractor)?;
    state.model.check_extractor(&extractor)?;
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in state.epoch..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let pairs = epoch_pairs(corpus, cfg, epoch)?;
        let mut sum = LossReport::default();
        let mut steps = 0;
        for batch in pairs.chunks(cfg.batch_size) {
            let model = &state.model;
            let items: Vec<ItemResult> =
                batch.par_iter().map(|p| pair_gradients(model, &extractor, p, weights, mcfg)).collect::<Result<_>>()?;
            let n = items.len() as f64;
            let finite = items
                .iter()
                .all(|r| r.report.total.is_finite() && r.grads.iter().all(|t| t.data().iter().all(|v| v.is_finite())));
            if !finite {
                let msg = diagnostics(epoch, step, model, &items);
                log::error!("{msg}");
                return Err(Error::Numeric(msg));
            }
            let mut grads: Vec<Tensor> = model.params().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for r in &items {
                for (acc, gi) in grads.iter_mut().zip(&r.grads) {
                    acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b / n);
                }
                sum.total += r.report.total;
                sum.mask_term += r.report.mask_term;
                sum.flow_term += r.report.flow_term;
                sum.smooth_term += r.report.smooth_term;
            }
            steps += items.len();
            adam_step(&mut state.model.params_mut(), &grads, &mut state.adam, lr)?;
            step += 1;
        }
        let k = steps.max(1) as f64;
        let mean = LossReport {
            total: sum.total / k,
            mask_term: sum.mask_term / k,
            flow_term: sum.flow_term / k,
            smooth_term: sum.smooth_term / k,
        };
        let stats = EpochStats { epoch, lr, steps: pairs.len().div_ceil(cfg.batch_size), mean };
        log::info!(
            "epoch {epoch}: loss {:.5} (mask {:.5}, flow {:.5}, smooth {:.5})",
            mean.total,
            mean.mask_term,
            mean.flow_term,
            mean.smooth_term
        );
        on_epoch(&stats);
        history.push(stats);
        state.epoch = epoch + 1;
    }
    Ok(TrainOutcome { state, history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamEntry {
    step: u64,
    beta1: f64,
    beta2: f64,
    first_moments: Vec<BlobEntry>,
    second_moments: Vec<BlobEntry>,
}

/// `index.json` of a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointIndex {
    pub format: String,
    pub version: u32,
    pub epoch: usize,
    pub extractor: ExtractorConfig,
    params: Vec<BlobEntry>,
    adam: Option<AdamEntry>,
}

pub const CHECKPOINT_FORMAT: &str = "semflow-checkpoint";
pub const INDEX_FILE: &str = "index.json";

/// Weight tensors are stored as SFNF blobs with header `(1, 1, n)` for
/// vectors and `(k, k, c_in·c_out)` for convolution kernels.
fn blob_dims(shape: &[usize]) -> [usize; 3] {
    match *shape {
        [k1, k2, ci, co] => [k1, k2, ci * co],
        _ => [1, 1, shape.iter().product()],
    }
}

fn write_blob(dir: &Path, name: &str, shape: &[usize], data: &[f64]) -> Result<BlobEntry> {
    let file = format!("{}.sfnf", name.replace('.', "_"));
    let bytes = formats::encode(formats::FEATURE_MAGIC, &blob_dims(shape), data.iter().copied());
    let path = dir.join(&file);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(BlobEntry { name: name.to_string(), file, shape: shape.to_vec() })
}

fn read_blob(dir: &Path, entry: &BlobEntry) -> Result<Tensor> {
    let path = dir.join(&entry.file);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let (dims, data) = formats::decode(&bytes, formats::FEATURE_MAGIC, 3, 1).map_err(|e| e.in_file(&path))?;
    if dims != blob_dims(&entry.shape) {
        return Err(shape_err!("{}: header {dims:?} does not match shape {:?}", path.display(), entry.shape));
    }
    Tensor::new(&entry.shape, data)
}

/// Writes parameters (and Adam moments, when given) into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    state: &TrainState,
    extractor: &ExtractorConfig,
    with_adam: bool,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let params = state
        .model
        .params()
        .iter()
        .zip(PARAM_NAMES)
        .map(|(t, n)| write_blob(dir, n, t.shape(), t.data()))
        .collect::<Result<Vec<_>>>()?;
    let adam = if with_adam {
        let shapes: Vec<Vec<usize>> = state.model.params().iter().map(|t| t.shape().to_vec()).collect();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for (i, n) in PARAM_NAMES.iter().enumerate() {
            first.push(write_blob(dir, &format!("adam.m.{n}"), &shapes[i], &state.adam.m[i])?);
            second.push(write_blob(dir, &format!("adam.v.{n}"), &shapes[i], &state.adam.v[i])?);
        }
        Some(AdamEntry {
            step: state.adam.step,
            beta1: state.adam.beta1,
            beta2: state.adam.beta2,
            first_moments: first,
            second_moments: second,
        })
    } else {
        None
    };
    let index = CheckpointIndex {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        epoch: state.epoch,
        extractor: *extractor,
        params,
        adam,
    };
    let path = dir.join(INDEX_FILE);
    let json = serde_json::to_string_pretty(&index).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn layer_from(tensors: &[Tensor]) -> Result<AdaptationLayer> {
    use crate::features::ConvBlock;
    AdaptationLayer::from_blocks([
        ConvBlock { weight: tensors[0].clone(), bias: tensors[1].clone() },
        ConvBlock { weight: tensors[2].clone(), bias: tensors[3].clone() },
    ])
}

/// Reads a checkpoint directory. Without stored Adam moments the optimizer
/// state starts fresh.
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, ExtractorConfig)> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: CheckpointIndex =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if index.format != CHECKPOINT_FORMAT || index.version != 1 {
        return Err(Error::Format(format!("{}: not a version 1 {CHECKPOINT_FORMAT} index", path.display())));
    }
    let names: Vec<&str> = index.params.iter().map(|b| b.name.as_str()).collect();
    if names != PARAM_NAMES {
        return Err(Error::Format(format!("{}: unexpected parameter list {names:?}", path.display())));
    }
    let tensors = index.params.iter().map(|b| read_blob(dir, b)).collect::<Result<Vec<_>>>()?;
    let model = Model { fine: layer_from(&tensors[..4])?, coarse: layer_from(&tensors[4..])? };
    let adam = match &index.adam {
        Some(a) => {
            let m = a.first_moments.iter().map(|b| read_blob(dir, b).map(Tensor::into_data)).collect::<Result<_>>()?;
            let v = a.second_moments.iter().map(|b| read_blob(dir, b).map(Tensor::into_data)).collect::<Result<_>>()?;
            AdamState { beta1: a.beta1, beta2: a.beta2, step: a.step, m, v }
        }
        None => AdamState::for_params(&model.params(), 0.9, 0.999),
    };
    Ok((TrainState { model, adam, epoch: index.epoch }, index.extractor))
}
