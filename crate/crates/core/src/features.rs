//! Feature maps, residual adaptation layers and a frozen toy extractor.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::formats;
use crate::image::{area_resample, Image};

/// `h x w` grid of `d`-dimensional descriptors, channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    d: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::Invalid(format!("empty feature map {h}x{w}x{d}")));
        }
        if data.len() != h * w * d {
            return Err(shape_err!("feature map {h}x{w}x{d} needs {} values, got {}", h * w * d, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature map contains non-finite values".into()));
        }
        Ok(Self { h, w, d, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn vector(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.w + x) * self.d;
        &self.data[i..i + self.d]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.h, self.w, self.d], self.data.clone()).expect("dims agree")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w, d] => Self::new(h, w, d, t.data().to_vec()),
            ref s => Err(shape_err!("feature tensor must be h x w x d, got {s:?}")),
        }
    }

    /// Bilinear resize to another grid (cell-centre aligned).
    pub fn resized(&self, h: usize, w: usize) -> FeatureMap {
        let data = kernels::resize_bilinear(&self.data, self.h, self.w, self.d, h, w);
        FeatureMap { h, w, d: self.d, data }
    }

    pub fn to_sfnf_bytes(&self) -> Vec<u8> {
        formats::encode(formats::FEATURE_MAGIC, &[self.h, self.w, self.d], self.data.iter().copied())
    }

    pub fn from_sfnf_bytes(bytes: &[u8]) -> Result<Self> {
        let (dims, data) = formats::decode(bytes, formats::FEATURE_MAGIC, 3, 1)?;
        Self::new(dims[0], dims[1], dims[2], data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_sfnf_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMap::from_sfnf_bytes(&bytes).map_err(|e| e.in_file(path))
}

/// L2-normalizes every descriptor and reports how many were zero (those stay
/// zero).
pub fn normalize_features_counted(f: &FeatureMap) -> (FeatureMap, usize) {
    let (data, norms) = kernels::l2_normalize_rows(&f.data, f.d);
    let zeros = norms.iter().filter(|&&n| n == 0.0).count();
    if zeros > 0 {
        log::debug!("normalize_features: {zeros} zero descriptors left as zero");
    }
    (FeatureMap { data, ..*f }, zeros)
}

pub fn normalize_features(f: &FeatureMap) -> FeatureMap {
    normalize_features_counted(f).0
}

/// One same-padded convolution: weight `k x k x c_in x c_out`, bias `c_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Residual adaptation: `f + conv2(relu(conv1(f)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationLayer {
    kernel_size: usize,
    channels: usize,
    blocks: [ConvBlock; 2],
}

impl AdaptationLayer {
    pub fn zeros(channels: usize, kernel_size: usize) -> Result<Self> {
        Self::from_fn(channels, kernel_size, |_| 0.0)
    }

    /// Uniform initialization in `±scale·sqrt(3 / fan_in)`; biases zero.
    pub fn random(channels: usize, kernel_size: usize, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let bound = scale * (3.0 / (kernel_size * kernel_size * channels) as f64).sqrt();
        Self::from_fn(channels, kernel_size, |_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 })
    }

    fn from_fn(channels: usize, kernel_size: usize, mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        if kernel_size.is_multiple_of(2) || channels == 0 {
            return Err(Error::Invalid(format!(
                "adaptation layer needs odd kernel size and channels > 0, got k={kernel_size}, d={channels}"
            )));
        }
        let n = kernel_size * kernel_size * channels * channels;
        let block = |f: &mut dyn FnMut(usize) -> f64| ConvBlock {
            weight: Tensor::new(&[kernel_size, kernel_size, channels, channels], (0..n).map(&mut *f).collect())
                .expect("dims agree"),
            bias: Tensor::zeros(&[channels]),
        };
        let b1 = block(&mut f);
        let b2 = block(&mut f);
        Ok(Self { kernel_size, channels, blocks: [b1, b2] })
    }

    pub fn from_blocks(blocks: [ConvBlock; 2]) -> Result<Self> {
        let shape = blocks[0].weight.shape().to_vec();
        let (k, c) = match shape[..] {
            [k, k2, c, c2] if k == k2 && c == c2 && k % 2 == 1 => (k, c),
            _ => return Err(shape_err!("adaptation weight must be k x k x d x d with odd k, got {shape:?}")),
        };
        for b in &blocks {
            if b.weight.shape() != shape.as_slice() || b.bias.shape() != [c] {
                return Err(shape_err!("adaptation blocks disagree in shape"));
            }
        }
        Ok(Self { kernel_size: k, channels: c, blocks })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn blocks(&self) -> &[ConvBlock; 2] {
        &self.blocks
    }

    /// Parameters in a fixed order: `w1, b1, w2, b2`.
    pub fn params(&self) -> [&Tensor; 4] {
        [&self.blocks[0].weight, &self.blocks[0].bias, &self.blocks[1].weight, &self.blocks[1].bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 4] {
        let [b0, b1] = &mut self.blocks;
        [&mut b0.weight, &mut b0.bias, &mut b1.weight, &mut b1.bias]
    }

    /// Adds the parameters to `g` as trainable leaves.
    pub fn leaves(&self, g: &mut Graph) -> [Var; 4] {
        self.params().map(|t| g.leaf(t.clone()))
    }
}

/// `f + conv2(relu(conv1(f)))` on the tape; `params` from
/// [`AdaptationLayer::leaves`].
pub fn adapt_graph(g: &mut Graph, f: Var, params: &[Var; 4]) -> Result<Var> {
    let h1 = g.conv2d(f, params[0], params[1])?;
    let a1 = g.relu(h1);
    let h2 = g.conv2d(a1, params[2], params[3])?;
    g.add(f, h2)
}

pub fn adapt(f: &FeatureMap, layer: &AdaptationLayer) -> Result<FeatureMap> {
    if f.d != layer.channels {
        return Err(shape_err!("adaptation layer expects {} channels, feature map has {}", layer.channels, f.d));
    }
    let k = layer.kernel_size;
    let [b1, b2] = &layer.blocks;
    let mut hidden = kernels::conv2d_same(&f.data, f.h, f.w, f.d, b1.weight.data(), k, f.d, b1.bias.data());
    hidden.iter_mut().for_each(|v| *v = v.max(0.0));
    let residual = kernels::conv2d_same(&hidden, f.h, f.w, f.d, b2.weight.data(), k, f.d, b2.bias.data());
    let data = f.data.iter().zip(&residual).map(|(a, b)| a + b).collect();
    FeatureMap::new(f.h, f.w, f.d, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub seed: u64,
    /// Descriptor dimension `d` of both levels.
    pub channels: usize,
    /// Working grid rows; must be even (the coarse level is half size).
    pub grid_h: usize,
    /// Working grid columns; must be even.
    pub grid_w: usize,
    /// Width of the first, full-resolution convolution.
    pub hidden: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { seed: 7, channels: 16, grid_h: 20, grid_w: 20, hidden: 8 }
    }
}

/// Features of both levels before adaptation: the fine map at the working
/// grid and the coarse map at half resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyFeatures {
    pub fine: FeatureMap,
    pub coarse: FeatureMap,
}

/// A frozen, fixed-seed random convolution stack.
///
/// The image is box-filtered to 4x the working grid, then passes through
/// three `3x3 conv -> relu -> 2x2 average pool` stages. The second stage
/// output is the fine level; the third is the coarse level.
#[derive(Debug, Clone)]
pub struct ToyExtractor {
    config: ExtractorConfig,
    stages: [ConvBlock; 3],
}

impl ToyExtractor {
    pub fn new(config: ExtractorConfig) -> Result<Self> {
        if config.channels == 0 || config.hidden == 0 {
            return Err(Error::Invalid("extractor channel counts must be positive".into()));
        }
        if config.grid_h < 2 || config.grid_w < 2 || config.grid_h % 2 == 1 || config.grid_w % 2 == 1 {
            return Err(Error::Invalid(format!(
                "working grid {}x{} must be even and at least 2x2",
                config.grid_h, config.grid_w
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut stage = |ci: usize, co: usize| {
            let bound = (6.0 / (9 * ci) as f64).sqrt();
            ConvBlock {
                weight: Tensor::new(&[3, 3, ci, co], (0..9 * ci * co).map(|_| rng.gen_range(-bound..bound)).collect())
                    .expect("dims agree"),
                bias: Tensor::new(&[co], (0..co).map(|_| rng.gen_range(-0.05..0.05)).collect()).expect("dims agree"),
            }
        };
        let s0 = stage(3, config.hidden);
        let s1 = stage(config.hidden, config.channels);
        let s2 = stage(config.channels, config.channels);
        Ok(Self { config, stages: [s0, s1, s2] })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.config.grid_h, self.config.grid_w)
    }

    pub fn extract_levels(&self, img: &Image) -> Result<ToyFeatures> {
        let (gh, gw) = self.grid();
        if img.h() < gh || img.w() < gw {
            return Err(Error::Invalid(format!(
                "image {}x{} is smaller than the {gh}x{gw} working grid",
                img.h(),
                img.w()
            )));
        }
        let rgb: Vec<f64> =
            if img.channels() == 3 { img.to_f64() } else { img.to_f64().into_iter().flat_map(|v| [v; 3]).collect() };
        let (mut h, mut w) = (4 * gh, 4 * gw);
        let mut x = area_resample(&rgb, img.h(), img.w(), 3, h, w);
        x.iter_mut().for_each(|v| *v -= 0.5);
        let mut c = 3;
        let mut levels = Vec::with_capacity(2);
        for (i, s) in self.stages.iter().enumerate() {
            let co = s.bias.numel();
            let mut y = kernels::conv2d_same(&x, h, w, c, s.weight.data(), 3, co, s.bias.data());
            y.iter_mut().for_each(|v| *v = v.max(0.0));
            x = area_resample(&y, h, w, co, h / 2, w / 2);
            h /= 2;
            w /= 2;
            c = co;
            if i >= 1 {
                levels.push(FeatureMap::new(h, w, c, x.clone())?);
            }
        }
        let coarse = levels.pop().expect("two levels");
        let fine = levels.pop().expect("two levels");
        Ok(ToyFeatures { fine, coarse })
    }
}

/// Both toy levels at the working resolution (the coarse one bilinearly
/// upsampled), without adaptation.
pub fn extract_toy(img: &Image, e: &ToyExtractor) -> Result<(FeatureMap, FeatureMap)> {
    let ToyFeatures { fine, coarse } = e.extract_levels(img)?;
    let up = coarse.resized(fine.h(), fine.w());
    Ok((fine, up))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, d: usize) -> FeatureMap {
        FeatureMap::new(h, w, d, (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let f = FeatureMap::new(1, 2, 2, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let (n, zeros) = normalize_features_counted(&f);
        assert_eq!(n.vector(0, 0), &[0.6, 0.8]);
        assert_eq!(n.vector(1, 0), &[0.0, 0.0]);
        assert_eq!(zeros, 1);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = normalize_features(&random_map(&mut rng, 6, 7, 5));
        for y in 0..6 {
            for x in 0..7 {
                let norm: f64 = n.vector(x, y).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-6);
            }
        }
        let twice = normalize_features(&n);
        for (a, b) in twice.data().iter().zip(n.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_layer_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_map(&mut rng, 5, 5, 4);
        let layer = AdaptationLayer::zeros(4, 5).unwrap();
        assert_eq!(adapt(&f, &layer).unwrap(), f);
    }

    #[test]
    fn identity_pointwise_residual_doubles() {
        // block1 = identity 1x1 conv (relu passes positive inputs),
        // block2 = identity 1x1 conv
        let d = 3;
        let eye: Vec<f64> = (0..d * d).map(|i| if i / d == i % d { 1.0 } else { 0.0 }).collect();
        let block =
            || ConvBlock { weight: Tensor::new(&[1, 1, d, d], eye.clone()).unwrap(), bias: Tensor::zeros(&[d]) };
        let layer = AdaptationLayer::from_blocks([block(), block()]).unwrap();
        let f = FeatureMap::new(2, 2, d, (1..=12).map(|v| v as f64).collect()).unwrap();
        let out = adapt(&f, &layer).unwrap();
        for (a, b) in out.data().iter().zip(f.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn adapt_rejects_channel_mismatch() {
        let f = FeatureMap::new(2, 2, 3, vec![0.0; 12]).unwrap();
        assert!(matches!(adapt(&f, &AdaptationLayer::zeros(4, 3).unwrap()), Err(Error::Shape(_))));
        assert!(AdaptationLayer::zeros(4, 4).is_err());
    }

    #[test]
    fn adapt_matches_graph_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = random_map(&mut rng, 5, 5, 4);
        let layer = AdaptationLayer::random(4, 3, 1.0, &mut rng).unwrap();
        let plain = adapt(&f, &layer).unwrap();
        let mut g = Graph::new();
        let fv = g.constant(f.to_tensor());
        let params = layer.leaves(&mut g);
        let out = adapt_graph(&mut g, fv, &params).unwrap();
        assert_eq!(g.value(out).data(), plain.data());
    }

    #[test]
    fn sfnf_round_trip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_map(&mut rng, 20, 20, 8);
        let f32_exact = FeatureMap::new(20, 20, 8, f.data().iter().map(|&v| v as f32 as f64).collect()).unwrap();
        let bytes = f32_exact.to_sfnf_bytes();
        assert_eq!(FeatureMap::from_sfnf_bytes(&bytes).unwrap(), f32_exact);
        assert_eq!(FeatureMap::from_sfnf_bytes(&bytes).unwrap().to_sfnf_bytes(), bytes);

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(FeatureMap::from_sfnf_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(FeatureMap::from_sfnf_bytes(&bytes[..bytes.len() - 4]), Err(Error::Format(_))));
    }

    fn textured(h: usize, w: usize, shift: usize) -> Image {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let xs = x as f64 - shift as f64;
                let v = 128.0
                    + 60.0 * (0.37 * xs).sin() * (0.21 * y as f64).cos()
                    + 40.0 * (0.05 * xs * y as f64 / 10.0).sin();
                data.extend_from_slice(&[
                    v as u8,
                    (255.0 - v) as u8,
                    ((xs as i64 * 7 + y as i64 * 3).rem_euclid(256)) as u8,
                ]);
            }
        }
        Image::new(h, w, 3, data).unwrap()
    }

    #[test]
    fn extractor_is_deterministic_and_sized() {
        let e = ToyExtractor::new(ExtractorConfig::default()).unwrap();
        let img = textured(160, 160, 0);
        let (a1, a2) = extract_toy(&img, &e).unwrap();
        let (b1, b2) = extract_toy(&img, &ToyExtractor::new(ExtractorConfig::default()).unwrap()).unwrap();
        assert_eq!((a1.h(), a1.w(), a1.d()), (20, 20, 16));
        assert_eq!((a2.h(), a2.w(), a2.d()), (20, 20, 16));
        assert_eq!(a1, b1);
        assert_eq!(a2, b2);
        assert!(extract_toy(&textured(10, 30, 0), &e).is_err());
    }

    #[test]
    fn extractor_translation_equivariance() {
        let e = ToyExtractor::new(ExtractorConfig::default()).unwrap();
        // stride is 8 px per fine cell at 160 px
        let base = e.extract_levels(&textured(160, 160, 0)).unwrap();
        let moved = e.extract_levels(&textured(160, 160, 16)).unwrap();
        for y in 3..17 {
            for x in 3..15 {
                for (a, b) in base.fine.vector(x, y).iter().zip(moved.fine.vector(x + 2, y)) {
                    assert!((a - b).abs() < 1e-9, "fine ({x},{y})");
                }
            }
        }
        for y in 2..8 {
            for x in 2..7 {
                for (a, b) in base.coarse.vector(x, y).iter().zip(moved.coarse.vector(x + 1, y)) {
                    assert!((a - b).abs() < 1e-9, "coarse ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn constant_image_gives_constant_interior() {
        let e = ToyExtractor::new(ExtractorConfig::default()).unwrap();
        let img = Image::new(80, 80, 1, vec![90; 6400]).unwrap();
        let (f1, _) = extract_toy(&img, &e).unwrap();
        let centre = f1.vector(10, 10).to_vec();
        for y in 2..18 {
            for x in 2..18 {
                for (a, b) in f1.vector(x, y).iter().zip(&centre) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
