//! Correlation volumes, matching probabilities and the argmax variants that
//! turn them into flow fields.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::features::{adapt, normalize_features, FeatureMap, ToyExtractor};
use crate::geometry::FlowField;
use crate::image::Image;
use crate::train::Model;

/// Correlation scores `c(p, q)` for every source cell `p` (rows) and target
/// cell `q` (columns), row-major in both.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMap {
    h: usize,
    w: usize,
    h2: usize,
    w2: usize,
    scores: Vec<f64>,
    normalized: bool,
}

impl CorrelationMap {
    pub fn new(src: (usize, usize), tgt: (usize, usize), scores: Vec<f64>) -> Result<Self> {
        let n = src.0 * src.1 * tgt.0 * tgt.1;
        if n == 0 {
            return Err(Error::Invalid("empty correlation map".into()));
        }
        if scores.len() != n {
            return Err(shape_err!("correlation {src:?}x{tgt:?} needs {n} scores, got {}", scores.len()));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("correlation contains non-finite scores".into()));
        }
        Ok(Self { h: src.0, w: src.1, h2: tgt.0, w2: tgt.1, scores, normalized: false })
    }

    pub fn source_dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn target_dims(&self) -> (usize, usize) {
        (self.h2, self.w2)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Set only by [`normalize_correlation`].
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn score(&self, p: (usize, usize), q: (usize, usize)) -> f64 {
        let pi = p.1 * self.w + p.0;
        let qi = q.1 * self.w2 + q.0;
        self.scores[pi * self.h2 * self.w2 + qi]
    }

    /// The target-cell scores of source cell index `p` (row-major).
    pub fn slice(&self, p: usize) -> &[f64] {
        let m = self.h2 * self.w2;
        &self.scores[p * m..(p + 1) * m]
    }

    /// Swaps source and target roles: `c'(q, p) = c(p, q)`.
    pub fn transposed(&self) -> CorrelationMap {
        let n = self.h * self.w;
        let m = self.h2 * self.w2;
        CorrelationMap {
            h: self.h2,
            w: self.w2,
            h2: self.h,
            w2: self.w,
            scores: crate::autodiff::kernels::transpose(&self.scores, n, m),
            normalized: false,
        }
    }
}

/// Dot products between every source and target descriptor.
pub fn correlate(src: &FeatureMap, tgt: &FeatureMap) -> Result<CorrelationMap> {
    if src.d() != tgt.d() {
        return Err(shape_err!("correlate: {} vs {} channels", src.d(), tgt.d()));
    }
    let d = src.d();
    let m = tgt.h() * tgt.w();
    let mut scores = vec![0.0; src.h() * src.w() * m];
    scores.par_chunks_mut(m).enumerate().for_each(|(p, row)| {
        let fp = &src.data()[p * d..(p + 1) * d];
        for (q, out) in row.iter_mut().enumerate() {
            let fq = &tgt.data()[q * d..(q + 1) * d];
            *out = fp.iter().zip(fq).map(|(a, b)| a * b).sum();
        }
    });
    CorrelationMap::new((src.h(), src.w()), (tgt.h(), tgt.w()), scores)
}

/// Divides each source cell's score map by its Frobenius norm.
pub fn normalize_correlation(c: &CorrelationMap) -> CorrelationMap {
    let m = c.h2 * c.w2;
    let mut scores = c.scores.clone();
    scores.par_chunks_mut(m).for_each(|row| {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    });
    CorrelationMap { scores, normalized: true, ..*c }
}

/// Element-wise product of two correlation volumes.
pub fn combine_correlations(c1: &CorrelationMap, c2: &CorrelationMap) -> Result<CorrelationMap> {
    if (c1.h, c1.w, c1.h2, c1.w2) != (c2.h, c2.w, c2.h2, c2.w2) {
        return Err(shape_err!(
            "combine_correlations: {:?}x{:?} vs {:?}x{:?}",
            c1.source_dims(),
            c1.target_dims(),
            c2.source_dims(),
            c2.target_dims()
        ));
    }
    let scores = c1.scores.iter().zip(&c2.scores).map(|(a, b)| a * b).collect();
    CorrelationMap::new(c1.source_dims(), c1.target_dims(), scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArgmaxMode {
    Discrete,
    Soft,
    KernelSoft,
}

impl std::str::FromStr for ArgmaxMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrete" => Ok(ArgmaxMode::Discrete),
            "soft" => Ok(ArgmaxMode::Soft),
            "kernel_soft" | "kernel-soft" => Ok(ArgmaxMode::KernelSoft),
            other => Err(Error::Invalid(format!("unknown argmax mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for ArgmaxMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ArgmaxMode::Discrete => "discrete",
            ArgmaxMode::Soft => "soft",
            ArgmaxMode::KernelSoft => "kernel_soft",
        })
    }
}

pub const DEFAULT_BETA: f64 = 50.0;
pub const DEFAULT_SIGMA: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    /// Softmax temperature.
    pub beta: f64,
    /// Standard deviation of the Gaussian gate, in grid cells.
    pub sigma: f64,
    pub mode: ArgmaxMode,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self { beta: DEFAULT_BETA, sigma: DEFAULT_SIGMA, mode: ArgmaxMode::KernelSoft }
    }
}

impl MatchConfig {
    pub fn new(beta: f64, sigma: f64, mode: ArgmaxMode) -> Result<Self> {
        let cfg = Self { beta, sigma, mode };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Per source cell, a distribution over target cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchProbability {
    pub h: usize,
    pub w: usize,
    pub h2: usize,
    pub w2: usize,
    pub probs: Vec<f64>,
    pub beta: f64,
    pub sigma: f64,
    /// Discrete argmax `(x, y)` of each source cell's normalized scores.
    pub kernel_centers: Vec<(usize, usize)>,
}

impl MatchProbability {
    pub fn distribution(&self, p: usize) -> &[f64] {
        let m = self.h2 * self.w2;
        &self.probs[p * m..(p + 1) * m]
    }
}

/// First maximum in row-major order.
pub fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Unnormalized Gaussian with peak 1 at `center`, over a `h x w` grid.
pub fn gaussian_gate(h: usize, w: usize, center: (usize, usize), sigma: f64) -> Vec<f64> {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut k = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - center.0 as f64;
            let dy = y as f64 - center.1 as f64;
            k.push((-(dx * dx + dy * dy) * inv).exp());
        }
    }
    k
}

/// `m_p(q) = softmax_q(beta · k_p(q) · n_p(q))`, with `k_p` centred on the
/// discrete argmax of `n_p` (or `k_p = 1` in soft mode).
pub fn matching_probability(c: &CorrelationMap, cfg: &MatchConfig) -> Result<MatchProbability> {
    if !c.normalized {
        return Err(Error::Invalid("matching_probability needs an L2-normalized correlation map".into()));
    }
    cfg.validate()?;
    let m = c.h2 * c.w2;
    let mut probs = vec![0.0; c.scores.len()];
    let mut centers = vec![(0, 0); c.h * c.w];
    probs.par_chunks_mut(m).zip(centers.par_iter_mut()).enumerate().for_each(|(p, (row, center))| {
        let n = c.slice(p);
        let a = argmax_first(n);
        *center = (a % c.w2, a / c.w2);
        let gate = match cfg.mode {
            ArgmaxMode::Soft => None,
            _ => Some(gaussian_gate(c.h2, c.w2, *center, cfg.sigma)),
        };
        let mut mx = f64::NEG_INFINITY;
        for (q, out) in row.iter_mut().enumerate() {
            let k = gate.as_ref().map_or(1.0, |g| g[q]);
            *out = cfg.beta * k * n[q];
            mx = mx.max(*out);
        }
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    });
    Ok(MatchProbability {
        h: c.h,
        w: c.w,
        h2: c.h2,
        w2: c.w2,
        probs,
        beta: cfg.beta,
        sigma: cfg.sigma,
        kernel_centers: centers,
    })
}

/// Expected target coordinate minus the source coordinate, per cell.
pub fn kernel_soft_argmax(m: &MatchProbability) -> FlowField {
    FlowField::from_fn(m.h, m.w, |x, y| {
        let dist = m.distribution(y * m.w + x);
        let mut phi = [0.0, 0.0];
        for (q, &pr) in dist.iter().enumerate() {
            phi[0] += pr * (q % m.w2) as f64;
            phi[1] += pr * (q / m.w2) as f64;
        }
        [phi[0] - x as f64, phi[1] - y as f64]
    })
}

/// Integer flow to the best-scoring target cell (first in row-major order on
/// ties).
pub fn discrete_argmax(c: &CorrelationMap) -> FlowField {
    FlowField::from_fn(c.h, c.w, |x, y| {
        let a = argmax_first(c.slice(y * c.w + x));
        [(a % c.w2) as f64 - x as f64, (a / c.w2) as f64 - y as f64]
    })
}

/// Flow from a combined (not yet normalized) correlation volume.
pub fn flow_from_correlation(c: &CorrelationMap, cfg: &MatchConfig) -> Result<FlowField> {
    match cfg.mode {
        ArgmaxMode::Discrete => Ok(discrete_argmax(c)),
        _ => Ok(kernel_soft_argmax(&matching_probability(&normalize_correlation(c), cfg)?)),
    }
}

/// Multi-level correlation: features are L2-normalized per level, correlated
/// and multiplied together.
pub fn correlate_levels(src: &[FeatureMap], tgt: &[FeatureMap]) -> Result<CorrelationMap> {
    if src.is_empty() || src.len() != tgt.len() {
        return Err(shape_err!("need matching non-empty level lists, got {} and {}", src.len(), tgt.len()));
    }
    let mut combined: Option<CorrelationMap> = None;
    for (s, t) in src.iter().zip(tgt) {
        let c = correlate(&normalize_features(s), &normalize_features(t))?;
        combined = Some(match combined {
            None => c,
            Some(acc) => combine_correlations(&acc, &c)?,
        });
    }
    Ok(combined.expect("at least one level"))
}

/// Source-to-target and target-to-source flows from per-level feature maps.
/// The reverse direction reuses the transposed correlation volume.
pub fn match_features(src: &[FeatureMap], tgt: &[FeatureMap], cfg: &MatchConfig) -> Result<(FlowField, FlowField)> {
    cfg.validate()?;
    let c = correlate_levels(src, tgt)?;
    let fs = flow_from_correlation(&c, cfg)?;
    let ft = flow_from_correlation(&c.transposed(), cfg)?;
    Ok((fs, ft))
}

/// Flows for a pair of images: toy features, optional adaptation layers,
/// then [`match_features`].
#[derive(Debug, Clone)]
pub struct Matcher {
    pub extractor: ToyExtractor,
    pub model: Option<Model>,
    pub config: MatchConfig,
}

impl Matcher {
    pub fn new(extractor: ToyExtractor, model: Option<Model>, config: MatchConfig) -> Result<Self> {
        config.validate()?;
        if let Some(m) = &model {
            m.check_extractor(&extractor)?;
        }
        Ok(Self { extractor, model, config })
    }

    /// Adapted (when a model is present) feature levels at the working grid.
    pub fn features(&self, img: &Image) -> Result<Vec<FeatureMap>> {
        let levels = self.extractor.extract_levels(img)?;
        let (fine, coarse) = match &self.model {
            Some(m) => (adapt(&levels.fine, &m.fine)?, adapt(&levels.coarse, &m.coarse)?),
            None => (levels.fine, levels.coarse),
        };
        let up = coarse.resized(fine.h(), fine.w());
        Ok(vec![fine, up])
    }

    pub fn match_images(&self, src: &Image, tgt: &Image) -> Result<(FlowField, FlowField)> {
        let fs = self.features(src)?;
        let ft = self.features(tgt)?;
        match_features(&fs, &ft, &self.config)
    }
}

/// Tape version of the matching pipeline.
pub mod graph {
    use super::*;

    /// Node ids of the intermediate stages, for inspection in tests.
    #[derive(Debug, Clone, Copy)]
    pub struct DirectionalFlow {
        pub normalized: Var,
        pub gate: Var,
        pub probs: Var,
        pub flow: Var,
    }

    /// `h x w x d` feature node -> L2-normalized `(h·w) x d` rows.
    pub fn normalized_rows(g: &mut Graph, f: Var) -> Result<Var> {
        let (h, w, d) = match *g.shape(f) {
            [h, w, d] => (h, w, d),
            ref s => return Err(shape_err!("feature node must be h x w x d, got {s:?}")),
        };
        let rows = g.reshape(f, &[h * w, d])?;
        g.l2_normalize_rows(rows)
    }

    /// Product over levels of `normalize(src) · normalize(tgt)ᵀ`.
    pub fn correlation(g: &mut Graph, src: &[Var], tgt: &[Var]) -> Result<Var> {
        if src.is_empty() || src.len() != tgt.len() {
            return Err(shape_err!("need matching non-empty level lists"));
        }
        let mut acc: Option<Var> = None;
        for (&s, &t) in src.iter().zip(tgt) {
            let sn = normalized_rows(g, s)?;
            let tn = normalized_rows(g, t)?;
            let tt = g.transpose(tn)?;
            let c = g.matmul(sn, tt)?;
            acc = Some(match acc {
                None => c,
                Some(a) => g.mul(a, c)?,
            });
        }
        Ok(acc.expect("at least one level"))
    }

    /// Kernel-soft (or soft) argmax flow from an `(h·w) x (h2·w2)`
    /// correlation node. The Gaussian gate is built from the value of the
    /// normalized scores and enters the tape as a stop-gradient constant.
    pub fn directional_flow(
        g: &mut Graph,
        corr: Var,
        src_dims: (usize, usize),
        tgt_dims: (usize, usize),
        cfg: &MatchConfig,
    ) -> Result<DirectionalFlow> {
        cfg.validate()?;
        let (h, w) = src_dims;
        let (h2, w2) = tgt_dims;
        if g.shape(corr) != [h * w, h2 * w2] {
            return Err(shape_err!("correlation node {:?} vs dims {src_dims:?}x{tgt_dims:?}", g.shape(corr)));
        }
        let m = h2 * w2;
        let n = g.l2_normalize_rows(corr)?;
        let mut gate = Vec::with_capacity(h * w * m);
        match cfg.mode {
            ArgmaxMode::Soft => gate.resize(h * w * m, 1.0),
            ArgmaxMode::KernelSoft => {
                for row in g.value(n).data().chunks_exact(m) {
                    let a = argmax_first(row);
                    gate.extend(gaussian_gate(h2, w2, (a % w2, a / w2), cfg.sigma));
                }
            }
            ArgmaxMode::Discrete => {
                return Err(Error::Invalid(
                    "the discrete argmax has no gradient; train with soft or kernel_soft".into(),
                ))
            }
        }
        let gate_node = g.constant(Tensor::new(&[h * w, m], gate)?);
        let gate = g.stop_gradient(gate_node);
        let gated = g.mul(n, gate)?;
        let logits = g.scale(gated, cfg.beta);
        let probs = g.softmax_over_cells(logits)?;
        let coords: Vec<f64> = (0..m).flat_map(|q| [(q % w2) as f64, (q / w2) as f64]).collect();
        let coords = g.constant(Tensor::new(&[m, 2], coords)?);
        let phi = g.matmul(probs, coords)?;
        let grid: Vec<f64> = (0..h * w).flat_map(|p| [(p % w) as f64, (p / w) as f64]).collect();
        let grid = g.constant(Tensor::new(&[h * w, 2], grid)?);
        let disp = g.sub(phi, grid)?;
        let flow = g.reshape(disp, &[h, w, 2])?;
        Ok(DirectionalFlow { normalized: n, gate, probs, flow })
    }

    /// Both flows (`h x w x 2` nodes) from per-level feature nodes.
    pub fn flows(g: &mut Graph, src: &[Var], tgt: &[Var], cfg: &MatchConfig) -> Result<(Var, Var)> {
        let sd = (g.shape(src[0])[0], g.shape(src[0])[1]);
        let td = (g.shape(tgt[0])[0], g.shape(tgt[0])[1]);
        let c = correlation(g, src, tgt)?;
        let ct = g.transpose(c)?;
        let fs = directional_flow(g, c, sd, td, cfg)?.flow;
        let ft = directional_flow(g, ct, td, sd, cfg)?.flow;
        Ok((fs, ft))
    }
}
