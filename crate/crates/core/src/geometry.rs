//! Grid coordinates, flow fields, affine transforms and the bilinear
//! warping operator shared by every loss.
//!
//! Points are `(x = column, y = row)` in cells, 0-based; cell `(i, j)` has its
//! centre at integer coordinates. Samples that fall outside the grid pick up
//! zero from the missing cells.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::formats;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
}

impl GridPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// An `h x w` grid of reals in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Invalid(format!("empty grid {h}x{w}")));
        }
        if values.len() != h * w {
            return Err(shape_err!("grid {h}x{w} needs {} values, got {}", h * w, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("grid contains non-finite values".into()));
        }
        Ok(Self { h, w, values })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, values: vec![0.0; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                values.push(f(x, y));
            }
        }
        Self { h, w, values }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.w + x]
    }
}

/// Displacements `(dx, dy)` per cell, in cells of this grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    h: usize,
    w: usize,
    vectors: Vec<[f64; 2]>,
}

impl FlowField {
    pub fn new(h: usize, w: usize, vectors: Vec<[f64; 2]>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Invalid(format!("empty flow field {h}x{w}")));
        }
        if vectors.len() != h * w {
            return Err(shape_err!("flow {h}x{w} needs {} vectors, got {}", h * w, vectors.len()));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("flow contains non-finite vectors".into()));
        }
        Ok(Self { h, w, vectors })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, vectors: vec![[0.0; 2]; h * w] }
    }

    pub fn uniform(h: usize, w: usize, v: [f64; 2]) -> Self {
        Self { h, w, vectors: vec![v; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> [f64; 2]) -> Self {
        let mut vectors = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                vectors.push(f(x, y));
            }
        }
        Self { h, w, vectors }
    }

    /// Builds a field from interleaved `dx, dy` values (row-major).
    pub fn from_interleaved(h: usize, w: usize, data: &[f64]) -> Result<Self> {
        if data.len() != 2 * h * w {
            return Err(shape_err!("flow {h}x{w} needs {} values, got {}", 2 * h * w, data.len()));
        }
        Self::new(h, w, data.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn vectors(&self) -> &[[f64; 2]] {
        &self.vectors
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.vectors[y * self.w + x]
    }

    pub fn interleaved(&self) -> Vec<f64> {
        self.vectors.iter().flatten().copied().collect()
    }

    /// One displacement component (0 = dx, 1 = dy) as a scalar grid.
    pub fn component(&self, axis: usize) -> ScalarGrid {
        ScalarGrid { h: self.h, w: self.w, values: self.vectors.iter().map(|v| v[axis]).collect() }
    }

    pub fn from_components(dx: &ScalarGrid, dy: &ScalarGrid) -> Result<Self> {
        check_same_dims((dx.h, dx.w), (dy.h, dy.w), "flow components")?;
        let vectors = dx.values.iter().zip(&dy.values).map(|(&a, &b)| [a, b]).collect();
        Self::new(dx.h, dx.w, vectors)
    }

    /// Largest per-cell Euclidean distance to another field.
    pub fn max_distance(&self, other: &FlowField) -> Result<f64> {
        check_same_dims((self.h, self.w), (other.h, other.w), "flow comparison")?;
        Ok(self
            .vectors
            .iter()
            .zip(&other.vectors)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .fold(0.0, f64::max))
    }

    pub fn to_sffl_bytes(&self) -> Vec<u8> {
        formats::encode(formats::FLOW_MAGIC, &[self.h, self.w], self.vectors.iter().flatten().copied())
    }

    pub fn from_sffl_bytes(bytes: &[u8]) -> Result<Self> {
        let (dims, data) = formats::decode(bytes, formats::FLOW_MAGIC, 2, 2)?;
        Self::from_interleaved(dims[0], dims[1], &data).map_err(|e| match e {
            Error::Numeric(m) => Error::Format(m),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_sffl_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_sffl_bytes(&bytes).map_err(|e| e.in_file(path))
    }
}

pub(crate) fn check_same_dims(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(shape_err!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1));
    }
    Ok(())
}

/// `p -> M p + t`, with `M = [[a11, a12], [a21, a22]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    a11: f64,
    a12: f64,
    a21: f64,
    a22: f64,
    tx: f64,
    ty: f64,
}

impl AffineTransform {
    pub fn new(a11: f64, a12: f64, a21: f64, a22: f64, tx: f64, ty: f64) -> Result<Self> {
        let t = Self { a11, a12, a21, a22, tx, ty };
        let params = [a11, a12, a21, a22, tx, ty];
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("affine transform has non-finite entries".into()));
        }
        let scale = a11.abs().max(a12.abs()).max(a21.abs()).max(a22.abs());
        if t.determinant().abs() <= 1e-12 * scale.max(1.0).powi(2) {
            return Err(Error::Invalid(format!("affine transform is not invertible (det = {})", t.determinant())));
        }
        Ok(t)
    }

    pub fn identity() -> Self {
        Self { a11: 1.0, a12: 0.0, a21: 0.0, a22: 1.0, tx: 0.0, ty: 0.0 }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { tx, ty, ..Self::identity() }
    }

    /// Rotation by `radians` about `center` (counter-clockwise in x/y axes).
    pub fn rotation_about(radians: f64, center: GridPoint) -> Self {
        let (s, c) = radians.sin_cos();
        let lin = Self { a11: c, a12: -s, a21: s, a22: c, tx: 0.0, ty: 0.0 };
        Self::translation(center.x, center.y).compose(&lin).compose(&Self::translation(-center.x, -center.y))
    }

    pub fn matrix(&self) -> [[f64; 2]; 2] {
        [[self.a11, self.a12], [self.a21, self.a22]]
    }

    pub fn offset(&self) -> [f64; 2] {
        [self.tx, self.ty]
    }

    pub fn determinant(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a21
    }

    pub fn apply(&self, p: GridPoint) -> GridPoint {
        GridPoint { x: self.a11 * p.x + self.a12 * p.y + self.tx, y: self.a21 * p.x + self.a22 * p.y + self.ty }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &AffineTransform) -> AffineTransform {
        AffineTransform {
            a11: self.a11 * other.a11 + self.a12 * other.a21,
            a12: self.a11 * other.a12 + self.a12 * other.a22,
            a21: self.a21 * other.a11 + self.a22 * other.a21,
            a22: self.a21 * other.a12 + self.a22 * other.a22,
            tx: self.a11 * other.tx + self.a12 * other.ty + self.tx,
            ty: self.a21 * other.tx + self.a22 * other.ty + self.ty,
        }
    }

    pub fn inverse(&self) -> AffineTransform {
        let det = self.determinant();
        let a11 = self.a22 / det;
        let a12 = -self.a12 / det;
        let a21 = -self.a21 / det;
        let a22 = self.a11 / det;
        AffineTransform {
            a11,
            a12,
            a21,
            a22,
            tx: -(a11 * self.tx + a12 * self.ty),
            ty: -(a21 * self.tx + a22 * self.ty),
        }
    }

    /// Re-expresses a transform given in the cell coordinates of a
    /// `from_w x from_h` grid in the cell coordinates of a `to_w x to_h` grid
    /// covering the same extent (cell-centre alignment).
    pub fn rescaled(&self, from: (usize, usize), to: (usize, usize)) -> AffineTransform {
        let to_target = frame_change(from, to);
        let back = frame_change(to, from);
        to_target.compose(self).compose(&back)
    }
}

/// Maps cell coordinates of an `(h, w)` grid onto an `(h2, w2)` grid spanning
/// the same extent: `g = (u + 0.5) * w2 / w - 0.5`.
fn frame_change(from: (usize, usize), to: (usize, usize)) -> AffineTransform {
    let sx = to.1 as f64 / from.1 as f64;
    let sy = to.0 as f64 / from.0 as f64;
    AffineTransform { a11: sx, a12: 0.0, a21: 0.0, a22: sy, tx: 0.5 * sx - 0.5, ty: 0.5 * sy - 0.5 }
}

/// Converts a continuous coordinate between two cell-centred axes.
pub fn rescale_coord(v: f64, from_len: usize, to_len: usize) -> f64 {
    (v + 0.5) * to_len as f64 / from_len as f64 - 0.5
}

/// One lattice cell touched by a bilinear sample.
#[derive(Debug, Clone, Copy, Default)]
pub struct Tap {
    pub index: usize,
    pub weight: f64,
    /// Partial derivative of `weight` w.r.t. the sample's x coordinate.
    pub d_dx: f64,
    /// Partial derivative of `weight` w.r.t. the sample's y coordinate.
    pub d_dy: f64,
}

/// The up-to-four in-grid cells around a sample point.
///
/// At exact lattice coordinates the cells `floor(x)` and `floor(x) + 1` are
/// used, which yields the right-hand derivative.
#[derive(Debug, Clone, Copy, Default)]
pub struct Taps {
    cells: [Tap; 4],
    len: usize,
}

impl Taps {
    pub fn iter(&self) -> impl Iterator<Item = &Tap> {
        self.cells[..self.len].iter()
    }
}

pub fn bilinear_taps(h: usize, w: usize, x: f64, y: f64) -> Taps {
    let mut taps = Taps::default();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let xs = [(x0, 1.0 - fx, -1.0), (x0 + 1.0, fx, 1.0)];
    let ys = [(y0, 1.0 - fy, -1.0), (y0 + 1.0, fy, 1.0)];
    for &(cy, wy, dwy) in &ys {
        if cy < 0.0 || cy >= h as f64 {
            continue;
        }
        for &(cx, wx, dwx) in &xs {
            if cx < 0.0 || cx >= w as f64 {
                continue;
            }
            taps.cells[taps.len] =
                Tap { index: cy as usize * w + cx as usize, weight: wx * wy, d_dx: dwx * wy, d_dy: wx * dwy };
            taps.len += 1;
        }
    }
    taps
}

/// `Σ_q grid(q) · max(0, 1-|x-q_x|) · max(0, 1-|y-q_y|)`; cells outside the
/// grid contribute zero.
pub fn bilinear_sample(grid: &ScalarGrid, at: GridPoint) -> f64 {
    bilinear_taps(grid.h, grid.w, at.x, at.y).iter().map(|t| grid.values[t.index] * t.weight).sum()
}

/// Gradient of [`bilinear_sample`] w.r.t. the sample position.
pub fn bilinear_sample_grad(grid: &ScalarGrid, at: GridPoint) -> [f64; 2] {
    bilinear_taps(grid.h, grid.w, at.x, at.y).iter().fold([0.0, 0.0], |acc, t| {
        let v = grid.values[t.index];
        [acc[0] + v * t.d_dx, acc[1] + v * t.d_dy]
    })
}

/// Warps `channels` interleaved channels of an `h x w` grid along `flow`
/// (interleaved `dx, dy`): `out(p) = values(p + flow(p))`.
pub fn warp_channels(values: &[f64], h: usize, w: usize, channels: usize, flow: &[f64]) -> Vec<f64> {
    debug_assert_eq!(values.len(), h * w * channels);
    debug_assert_eq!(flow.len(), h * w * 2);
    let mut out = vec![0.0; h * w * channels];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let sx = x as f64 + flow[2 * p];
            let sy = y as f64 + flow[2 * p + 1];
            let dst = &mut out[p * channels..(p + 1) * channels];
            for tap in bilinear_taps(h, w, sx, sy).iter() {
                let src = &values[tap.index * channels..(tap.index + 1) * channels];
                for (o, v) in dst.iter_mut().zip(src) {
                    *o += tap.weight * v;
                }
            }
        }
    }
    out
}

/// `out(p) = grid(p + flow(p))`, sampled bilinearly.
pub fn warp_scalar(grid: &ScalarGrid, flow: &FlowField) -> Result<ScalarGrid> {
    check_same_dims((grid.h, grid.w), (flow.h, flow.w), "warp_scalar")?;
    let values = warp_channels(&grid.values, grid.h, grid.w, 1, &flow.interleaved());
    Ok(ScalarGrid { h: grid.h, w: grid.w, values })
}

/// Aligns `target_flow` with `source_flow` by warping each of its components.
pub fn warp_flow(target_flow: &FlowField, source_flow: &FlowField) -> Result<FlowField> {
    check_same_dims((target_flow.h, target_flow.w), (source_flow.h, source_flow.w), "warp_flow")?;
    let data = warp_channels(&target_flow.interleaved(), target_flow.h, target_flow.w, 2, &source_flow.interleaved());
    FlowField::from_interleaved(target_flow.h, target_flow.w, &data)
}

/// Displacement field `t(p) - p` over an `h x w` grid.
pub fn affine_to_flow(t: &AffineTransform, h: usize, w: usize) -> Result<FlowField> {
    if h == 0 || w == 0 {
        return Err(Error::Invalid(format!("empty flow grid {h}x{w}")));
    }
    Ok(FlowField::from_fn(h, w, |x, y| {
        let p = GridPoint::new(x as f64, y as f64);
        let q = t.apply(p);
        [q.x - p.x, q.y - p.y]
    }))
}

/// Linear interpolation taps for resampling an axis of `in_len` cells onto
/// `out_len` cells over the same extent. Positions past the outermost cell
/// centres are clamped, so the end cells are reproduced exactly.
pub fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let s = rescale_coord(o as f64, out_len, in_len).clamp(0.0, (in_len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinearly upsamples a flow field and rescales its vectors into output
/// cell units.
pub fn upsample_flow(flow: &FlowField, out_h: usize, out_w: usize) -> Result<FlowField> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Invalid(format!("upsample target {out_h}x{out_w} is empty")));
    }
    if out_h < flow.h || out_w < flow.w {
        return Err(Error::Invalid(format!(
            "upsample target {out_h}x{out_w} is smaller than the flow {}x{}",
            flow.h, flow.w
        )));
    }
    let sx = out_w as f64 / flow.w as f64;
    let sy = out_h as f64 / flow.h as f64;
    let xt = linear_taps(flow.w, out_w);
    let yt = linear_taps(flow.h, out_h);
    let mut vectors = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &yt {
        for &(x0, x1, fx) in &xt {
            let mut v = [0.0; 2];
            let cells = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x1, y0, fx * (1.0 - fy)),
                (x0, y1, (1.0 - fx) * fy),
                (x1, y1, fx * fy),
            ];
            for (cx, cy, wgt) in cells {
                let f = flow.vectors[cy * flow.w + cx];
                v[0] += wgt * f[0];
                v[1] += wgt * f[1];
            }
            vectors.push([v[0] * sx, v[1] * sy]);
        }
    }
    FlowField::new(out_h, out_w, vectors)
}

/// Samples a flow field at a continuous position, clamping the position to
/// the grid so that border cells extend outward.
pub fn sample_flow_clamped(flow: &FlowField, at: GridPoint) -> [f64; 2] {
    let x = at.x.clamp(0.0, (flow.w - 1) as f64);
    let y = at.y.clamp(0.0, (flow.h - 1) as f64);
    let mut v = [0.0; 2];
    for t in bilinear_taps(flow.h, flow.w, x, y).iter() {
        let f = flow.vectors[t.index];
        v[0] += t.weight * f[0];
        v[1] += t.weight * f[1];
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ScalarGrid {
        ScalarGrid::from_fn(h, w, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// The literal double sum over every cell.
    fn brute_force_sample(g: &ScalarGrid, x: f64, y: f64) -> f64 {
        let mut acc = 0.0;
        for qy in 0..g.h() {
            for qx in 0..g.w() {
                acc += g.get(qx, qy) * (1.0 - (x - qx as f64).abs()).max(0.0) * (1.0 - (y - qy as f64).abs()).max(0.0);
            }
        }
        acc
    }

    #[test]
    fn sample_on_lattice_and_midpoint() {
        let g = ScalarGrid::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bilinear_sample(&g, GridPoint::new(0.0, 0.0)), 0.0);
        assert_eq!(bilinear_sample(&g, GridPoint::new(0.5, 0.5)), 1.5);
    }

    #[test]
    fn sample_matches_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_grid(&mut rng, 5, 5);
        let got = bilinear_sample(&g, GridPoint::new(1.3, 2.7));
        assert!((got - brute_force_sample(&g, 1.3, 2.7)).abs() < 1e-12);
    }

    #[test]
    fn far_outside_is_zero() {
        let g = ScalarGrid::from_fn(3, 3, |_, _| 1.0);
        assert_eq!(bilinear_sample(&g, GridPoint::new(-5.0, 1.0)), 0.0);
        assert_eq!(bilinear_sample(&g, GridPoint::new(1.0, 40.0)), 0.0);
        // half a cell past the edge keeps half the border value
        assert!((bilinear_sample(&g, GridPoint::new(2.5, 1.0)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn warp_ramp_with_half_cell_shift() {
        let g = ScalarGrid::new(1, 4, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let f = FlowField::uniform(1, 4, [0.5, 0.0]);
        let out = warp_scalar(&g, &f).unwrap();
        assert_eq!(out.values(), &[0.5, 1.5, 2.5, 1.5]);
    }

    #[test]
    fn warp_matches_per_pixel_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = random_grid(&mut rng, 6, 6);
        let f = FlowField::from_fn(6, 6, |_, _| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
        let out = warp_scalar(&g, &f).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let v = f.get(x, y);
                let want = brute_force_sample(&g, x as f64 + v[0], y as f64 + v[1]);
                assert!((out.get(x, y) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warp_rejects_mismatched_dims() {
        let g = ScalarGrid::zeros(3, 3);
        let f = FlowField::zeros(3, 4);
        assert!(matches!(warp_scalar(&g, &f), Err(Error::Shape(_))));
        assert!(matches!(warp_flow(&f, &FlowField::zeros(4, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn warp_flow_identities_and_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = FlowField::from_fn(5, 4, |_, _| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
        let b = FlowField::from_fn(5, 4, |_, _| [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]);
        assert_eq!(warp_flow(&FlowField::zeros(5, 4), &b).unwrap(), FlowField::zeros(5, 4));
        assert_eq!(warp_flow(&a, &FlowField::zeros(5, 4)).unwrap(), a);
        let warped = warp_flow(&a, &b).unwrap();
        let dx = warp_scalar(&a.component(0), &b).unwrap();
        let dy = warp_scalar(&a.component(1), &b).unwrap();
        assert_eq!(warped, FlowField::from_components(&dx, &dy).unwrap());
    }

    #[test]
    fn affine_flows() {
        assert_eq!(affine_to_flow(&AffineTransform::identity(), 4, 4).unwrap(), FlowField::zeros(4, 4));
        let t = affine_to_flow(&AffineTransform::translation(1.0, 0.0), 3, 3).unwrap();
        assert!(t.vectors().iter().all(|v| *v == [1.0, 0.0]));

        let rot = AffineTransform::rotation_about(std::f64::consts::FRAC_PI_2, GridPoint::new(2.0, 2.0));
        let f = affine_to_flow(&rot, 5, 5).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                // direct matrix application: (x, y) -> (2 - (y - 2), 2 + (x - 2))
                let want = [(4.0 - y as f64) - x as f64, x as f64 - y as f64];
                let got = f.get(x, y);
                assert!((got[0] - want[0]).abs() < 1e-12 && (got[1] - want[1]).abs() < 1e-12);
            }
        }
        // corner (0,0) lands on corner (4,0)
        assert!((f.get(0, 0)[0] - 4.0).abs() < 1e-12 && f.get(0, 0)[1].abs() < 1e-12);
    }

    #[test]
    fn singular_transform_rejected() {
        assert!(AffineTransform::new(1.0, 2.0, 2.0, 4.0, 0.0, 0.0).is_err());
        assert!(AffineTransform::new(1.0, 0.0, 0.0, 1.0, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn rescaled_translation_scales_offset() {
        let t = AffineTransform::translation(8.0, 0.0).rescaled((320, 320), (20, 20));
        let p = t.apply(GridPoint::new(3.0, 7.0));
        assert!((p.x - 3.5).abs() < 1e-12 && (p.y - 7.0).abs() < 1e-12);
    }

    #[test]
    fn upsample_constant_and_corners() {
        let f = FlowField::uniform(2, 2, [1.0, 0.0]);
        let up = upsample_flow(&f, 6, 8).unwrap();
        assert!(up.vectors().iter().all(|v| (v[0] - 4.0).abs() < 1e-12 && v[1] == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = FlowField::from_fn(20, 20, |_, _| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]);
        let up = upsample_flow(&f, 320, 320).unwrap();
        for (x, y, ux, uy) in [(0, 0, 0, 0), (19, 0, 319, 0), (0, 19, 0, 319), (19, 19, 319, 319)] {
            let a = f.get(x, y);
            let b = up.get(ux, uy);
            assert!((b[0] - 16.0 * a[0]).abs() < 1e-12 && (b[1] - 16.0 * a[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_matches_bilinear_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = FlowField::from_fn(4, 4, |_, _| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
        let up = upsample_flow(&f, 8, 8).unwrap();
        for v in 0..8 {
            for u in 0..8 {
                let gx = ((u as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 3.0);
                let gy = ((v as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 3.0);
                let dx = brute_force_sample(&f.component(0), gx, gy) * 2.0;
                let dy = brute_force_sample(&f.component(1), gx, gy) * 2.0;
                let got = up.get(u, v);
                assert!((got[0] - dx).abs() < 1e-12 && (got[1] - dy).abs() < 1e-12);
            }
        }
        assert!(upsample_flow(&f, 0, 8).is_err());
        assert!(upsample_flow(&f, 2, 8).is_err());
    }

    #[test]
    fn sffl_round_trip_and_errors() {
        let f = FlowField::from_fn(3, 5, |x, y| [x as f64 * 0.5, -(y as f64)]);
        let bytes = f.to_sffl_bytes();
        assert_eq!(&bytes[..4], b"SFFL");
        assert_eq!(bytes.len(), 12 + 3 * 5 * 8);
        assert_eq!(FlowField::from_sffl_bytes(&bytes).unwrap(), f);
        assert!(matches!(FlowField::from_sffl_bytes(&bytes[..20]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(FlowField::from_sffl_bytes(&bad), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn identity_warp_is_exact(vals in proptest::collection::vec(-1e3f64..1e3, 1..64), w in 1usize..8) {
            let h = vals.len() / w;
            prop_assume!(h > 0);
            let g = ScalarGrid::new(h, w, vals[..h * w].to_vec()).unwrap();
            prop_assert_eq!(warp_scalar(&g, &FlowField::zeros(h, w)).unwrap(), g);
        }

        #[test]
        fn interior_weights_partition_unity(x in 0.0f64..4.0, y in 0.0f64..3.0) {
            let total: f64 = bilinear_taps(4, 5, x, y).iter().map(|t| t.weight).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn interior_sample_within_neighbour_range(seed in 0u64..1000, x in 0.0f64..4.0, y in 0.0f64..4.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_grid(&mut rng, 5, 5);
            let v = bilinear_sample(&g, GridPoint::new(x, y));
            let taps = bilinear_taps(5, 5, x, y);
            let lo = taps.iter().map(|t| g.values()[t.index]).fold(f64::INFINITY, f64::min);
            let hi = taps.iter().map(|t| g.values()[t.index]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }

        #[test]
        fn sample_gradient_matches_central_differences(seed in 0u64..1000, x in -0.9f64..5.9, y in -0.9f64..5.9) {
            prop_assume!((x - x.round()).abs() > 1e-3 && (y - y.round()).abs() > 1e-3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_grid(&mut rng, 6, 6);
            let h = 1e-4;
            let grad = bilinear_sample_grad(&g, GridPoint::new(x, y));
            let fd = [
                (bilinear_sample(&g, GridPoint::new(x + h, y)) - bilinear_sample(&g, GridPoint::new(x - h, y))) / (2.0 * h),
                (bilinear_sample(&g, GridPoint::new(x, y + h)) - bilinear_sample(&g, GridPoint::new(x, y - h))) / (2.0 * h),
            ];
            for k in 0..2 {
                let scale = grad[k].abs().max(fd[k].abs()).max(1e-8);
                prop_assert!((grad[k] - fd[k]).abs() / scale < 1e-4 || (grad[k] - fd[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn lattice_gradient_is_right_derivative() {
        let g = ScalarGrid::new(1, 3, vec![0.0, 1.0, 5.0]).unwrap();
        // at x = 1 the right-hand slope is 4 (towards the cell holding 5)
        assert_eq!(bilinear_sample_grad(&g, GridPoint::new(1.0, 0.0))[0], 4.0);
    }

    #[test]
    fn inverse_affine_pair_cancels_on_interior() {
        let t = AffineTransform::new(1.05, 0.1, -0.08, 0.95, 0.6, -0.4).unwrap();
        let t = AffineTransform::translation(7.0, 7.0).compose(&t).compose(&AffineTransform::translation(-7.0, -7.0));
        let fs = affine_to_flow(&t, 15, 15).unwrap();
        let ft = affine_to_flow(&t.inverse(), 15, 15).unwrap();
        let warped = warp_flow(&ft, &fs).unwrap();
        for y in 4..11 {
            for x in 4..11 {
                let a = fs.get(x, y);
                let b = warped.get(x, y);
                assert!((a[0] + b[0]).abs() < 1e-6 && (a[1] + b[1]).abs() < 1e-6);
            }
        }
    }
}
