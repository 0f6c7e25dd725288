//! Mask consistency, flow consistency and smoothness objectives, built on the
//! tape so they can be differentiated through the flows.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{check_same_dims, FlowField};
use crate::image::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_mask: f64,
    pub lambda_flow: f64,
    pub lambda_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_mask: 3.0, lambda_flow: 16.0, lambda_smooth: 0.5 }
    }
}

impl LossWeights {
    pub fn new(lambda_mask: f64, lambda_flow: f64, lambda_smooth: f64) -> Result<Self> {
        let w = Self { lambda_mask, lambda_flow, lambda_smooth };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_mask", self.lambda_mask),
            ("lambda_flow", self.lambda_flow),
            ("lambda_smooth", self.lambda_smooth),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.lambda_mask == 0.0 && self.lambda_flow == 0.0 && self.lambda_smooth == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub mask_term: f64,
    pub flow_term: f64,
    pub smooth_term: f64,
}

impl LossReport {
    pub fn from_terms(mask_term: f64, flow_term: f64, smooth_term: f64, w: &LossWeights) -> Self {
        let total = w.lambda_mask * mask_term + w.lambda_flow * flow_term + w.lambda_smooth * smooth_term;
        Self { total, mask_term, flow_term, smooth_term }
    }
}

/// Scalar nodes for the three terms.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub mask: Var,
    pub flow: Var,
    pub smooth: Var,
}

impl LossNodes {
    pub fn total(&self, g: &mut Graph, w: &LossWeights) -> Var {
        let m = g.scale(self.mask, w.lambda_mask);
        let f = g.scale(self.flow, w.lambda_flow);
        let s = g.scale(self.smooth, w.lambda_smooth);
        let mf = g.add(m, f).expect("scalars");
        g.add(mf, s).expect("scalars")
    }

    pub fn report(&self, g: &Graph, w: &LossWeights) -> LossReport {
        LossReport::from_terms(g.value(self.mask).item(), g.value(self.flow).item(), g.value(self.smooth).item(), w)
    }
}

/// Masks of one pair plus an optional region that limits every sum (and
/// every normalizing count) to the cells where it is foreground.
#[derive(Debug, Clone, Copy)]
pub struct LossMasks<'a> {
    pub src: &'a Mask,
    pub tgt: &'a Mask,
    pub region: Option<&'a Mask>,
}

impl<'a> LossMasks<'a> {
    pub fn new(src: &'a Mask, tgt: &'a Mask) -> Self {
        Self { src, tgt, region: None }
    }

    pub fn within(mut self, region: &'a Mask) -> Self {
        self.region = Some(region);
        self
    }
}

fn region_weight(region: Option<&Mask>, i: usize) -> f64 {
    region.map_or(1.0, |r| if r.values()[i] > 0.5 { 1.0 } else { 0.0 })
}

/// Per-cell `region` indicator repeated over `k` channels.
fn region_tensor(h: usize, w: usize, k: usize, region: Option<&Mask>) -> Tensor {
    let data = (0..h * w).flat_map(|i| std::iter::repeat_n(region_weight(region, i), k)).collect();
    Tensor::new(&[h, w, k], data).expect("sized")
}

/// Binarized mask times region, repeated over `k` channels, and its count.
fn gate_tensor(m: &Mask, k: usize, region: Option<&Mask>) -> (Tensor, usize) {
    let mut count = 0;
    let mut data = Vec::with_capacity(m.pixel_count() * k);
    for (i, &v) in m.values().iter().enumerate() {
        let on = if v > 0.5 { region_weight(region, i) } else { 0.0 };
        if on > 0.0 {
            count += 1;
        }
        data.extend(std::iter::repeat_n(on, k));
    }
    (Tensor::new(&[m.h(), m.w(), k], data).expect("sized"), count)
}

fn check_inputs(g: &Graph, fs: Var, ft: Var, masks: &LossMasks) -> Result<(usize, usize)> {
    let (h, w) = masks.src.dims();
    check_same_dims(masks.src.dims(), masks.tgt.dims(), "loss masks")?;
    if let Some(r) = masks.region {
        check_same_dims(r.dims(), (h, w), "loss region")?;
    }
    for (name, f) in [("source flow", fs), ("target flow", ft)] {
        if g.shape(f) != [h, w, 2] {
            return Err(shape_err!("{name} {:?} does not match masks {h}x{w}", g.shape(f)));
        }
    }
    Ok((h, w))
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// `(1/N) Σ_p (M(p) - W(M_other; F)(p))²` for one direction.
fn mask_direction(g: &mut Graph, m: &Mask, other: &Mask, flow: Var, region: Option<&Mask>) -> Result<Var> {
    let (h, w) = m.dims();
    let n = match region {
        Some(r) => r.foreground_count(),
        None => m.pixel_count(),
    };
    if n == 0 {
        return Ok(zero(g));
    }
    let mv = g.constant(Tensor::new(&[h, w, 1], m.values().to_vec())?);
    let ov = g.constant(Tensor::new(&[h, w, 1], other.values().to_vec())?);
    let warped = g.warp(ov, flow)?;
    let diff = g.sub(mv, warped)?;
    let sq = g.square(diff);
    let sq = match region {
        Some(_) => {
            let r = g.constant(region_tensor(h, w, 1, region));
            g.mul(sq, r)?
        }
        None => sq,
    };
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// `(1/N_F) Σ_p ‖(F(p) + W(F_other; F)(p)) ⊙ M(p)‖²` for one direction.
fn flow_direction(g: &mut Graph, m: &Mask, flow: Var, other: Var, region: Option<&Mask>, label: &str) -> Result<Var> {
    let (gate, nf) = gate_tensor(m, 2, region);
    if nf == 0 {
        log::warn!("{label} mask has no foreground cells; flow consistency term set to 0");
        return Ok(zero(g));
    }
    let warped = g.warp(other, flow)?;
    let cycle = g.add(flow, warped)?;
    let gate = g.constant(gate);
    let gated = g.mul(cycle, gate)?;
    let sq = g.square(gated);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / nf as f64))
}

/// `(1/N_F) Σ_p ‖∇F(p) ⊙ M(p)‖₁` with forward differences.
fn smooth_direction(g: &mut Graph, m: &Mask, flow: Var, region: Option<&Mask>, label: &str) -> Result<Var> {
    let (gate, nf) = gate_tensor(m, 2, region);
    if nf == 0 {
        log::warn!("{label} mask has no foreground cells; smoothness term set to 0");
        return Ok(zero(g));
    }
    let gate = g.constant(gate);
    let mut acc: Option<Var> = None;
    for axis in [1, 0] {
        let d = g.forward_diff(flow, axis)?;
        let a = g.abs(d);
        let gated = g.mul(a, gate)?;
        let s = g.sum(gated);
        acc = Some(match acc {
            None => s,
            Some(prev) => g.add(prev, s)?,
        });
    }
    Ok(g.scale(acc.expect("two axes"), 1.0 / nf as f64))
}

/// Builds all three terms on the tape for flow nodes of shape `h x w x 2`.
pub fn loss_nodes(g: &mut Graph, fs: Var, ft: Var, masks: &LossMasks) -> Result<LossNodes> {
    check_inputs(g, fs, ft, masks)?;
    let LossMasks { src, tgt, region } = *masks;

    let ms = mask_direction(g, src, tgt, fs, region)?;
    let mt = mask_direction(g, tgt, src, ft, region)?;
    let mask = g.add(ms, mt)?;

    let cs = flow_direction(g, src, fs, ft, region, "source")?;
    let ct = flow_direction(g, tgt, ft, fs, region, "target")?;
    let flow = g.add(cs, ct)?;

    let ss = smooth_direction(g, src, fs, region, "source")?;
    let st = smooth_direction(g, tgt, ft, region, "target")?;
    let smooth = g.add(ss, st)?;

    Ok(LossNodes { mask, flow, smooth })
}

fn flow_constant(g: &mut Graph, f: &FlowField) -> Result<Var> {
    Ok(g.constant(Tensor::new(&[f.h(), f.w(), 2], f.interleaved())?))
}

/// Evaluates the three terms for concrete flows.
pub fn loss_terms(fs: &FlowField, ft: &FlowField, masks: &LossMasks) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let a = flow_constant(&mut g, fs)?;
    let b = flow_constant(&mut g, ft)?;
    let n = loss_nodes(&mut g, a, b, masks)?;
    Ok((g.value(n.mask).item(), g.value(n.flow).item(), g.value(n.smooth).item()))
}

pub fn mask_consistency(ms: &Mask, mt: &Mask, fs: &FlowField, ft: &FlowField) -> Result<f64> {
    Ok(loss_terms(fs, ft, &LossMasks::new(ms, mt))?.0)
}

pub fn flow_consistency(fs: &FlowField, ft: &FlowField, ms: &Mask, mt: &Mask) -> Result<f64> {
    Ok(loss_terms(fs, ft, &LossMasks::new(ms, mt))?.1)
}

pub fn smoothness(fs: &FlowField, ft: &FlowField, ms: &Mask, mt: &Mask) -> Result<f64> {
    Ok(loss_terms(fs, ft, &LossMasks::new(ms, mt))?.2)
}

pub fn total_loss(fs: &FlowField, ft: &FlowField, ms: &Mask, mt: &Mask, w: &LossWeights) -> Result<LossReport> {
    total_loss_masked(fs, ft, &LossMasks::new(ms, mt), w)
}

pub fn total_loss_masked(fs: &FlowField, ft: &FlowField, masks: &LossMasks, w: &LossWeights) -> Result<LossReport> {
    w.validate()?;
    let (m, f, s) = loss_terms(fs, ft, masks)?;
    Ok(LossReport::from_terms(m, f, s, w))
}

/// Cells at least `margin` cells away from every grid edge.
pub fn interior_region(h: usize, w: usize, margin: usize) -> Mask {
    Mask::from_fn(h, w, |x, y| x >= margin && y >= margin && x + margin < w && y + margin < h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{bilinear_sample, GridPoint};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
        Mask::from_fn(h, w, |_, _| rng.gen_bool(0.6))
    }

    fn random_flow(rng: &mut ChaCha8Rng, h: usize, w: usize, amp: f64) -> FlowField {
        FlowField::from_fn(h, w, |_, _| [rng.gen_range(-amp..amp), rng.gen_range(-amp..amp)])
    }

    fn oracle_mask_dir(m: &Mask, other: &Mask, f: &FlowField) -> f64 {
        let grid = other.to_grid();
        let mut s = 0.0;
        for y in 0..m.h() {
            for x in 0..m.w() {
                let v = f.get(x, y);
                let hat = bilinear_sample(&grid, GridPoint::new(x as f64 + v[0], y as f64 + v[1]));
                s += (m.get(x, y) - hat).powi(2);
            }
        }
        s / m.pixel_count() as f64
    }

    fn oracle_flow_dir(m: &Mask, f: &FlowField, other: &FlowField) -> f64 {
        let (cx, cy) = (other.component(0), other.component(1));
        let mut s = 0.0;
        for y in 0..m.h() {
            for x in 0..m.w() {
                if !m.is_foreground(x, y) {
                    continue;
                }
                let v = f.get(x, y);
                let at = GridPoint::new(x as f64 + v[0], y as f64 + v[1]);
                s += (v[0] + bilinear_sample(&cx, at)).powi(2) + (v[1] + bilinear_sample(&cy, at)).powi(2);
            }
        }
        s / m.foreground_count() as f64
    }

    fn oracle_smooth_dir(m: &Mask, f: &FlowField) -> f64 {
        let mut s = 0.0;
        for y in 0..m.h() {
            for x in 0..m.w() {
                if !m.is_foreground(x, y) {
                    continue;
                }
                let v = f.get(x, y);
                if x + 1 < m.w() {
                    let r = f.get(x + 1, y);
                    s += (r[0] - v[0]).abs() + (r[1] - v[1]).abs();
                }
                if y + 1 < m.h() {
                    let d = f.get(x, y + 1);
                    s += (d[0] - v[0]).abs() + (d[1] - v[1]).abs();
                }
            }
        }
        s / m.foreground_count() as f64
    }

    #[test]
    fn mask_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_mask(&mut rng, 5, 5);
        let z = FlowField::zeros(5, 5);
        assert_eq!(mask_consistency(&m, &m, &z, &z).unwrap(), 0.0);
        let z4 = FlowField::zeros(4, 4);
        let v = mask_consistency(&Mask::full(4, 4), &Mask::empty(4, 4), &z4, &z4).unwrap();
        assert_eq!(v, 2.0);
        for _ in 0..10 {
            let (ms, mt) = (random_mask(&mut rng, 6, 6), random_mask(&mut rng, 6, 6));
            let (fs, ft) = (random_flow(&mut rng, 6, 6, 2.0), random_flow(&mut rng, 6, 6, 2.0));
            let want = oracle_mask_dir(&ms, &mt, &fs) + oracle_mask_dir(&mt, &ms, &ft);
            assert!((mask_consistency(&ms, &mt, &fs, &ft).unwrap() - want).abs() < 1e-12);
        }
        assert!(mask_consistency(&Mask::full(4, 4), &Mask::full(4, 5), &z4, &z4).is_err());
    }

    #[test]
    fn flow_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = FlowField::zeros(6, 6);
        let m = random_mask(&mut rng, 6, 6);
        assert_eq!(flow_consistency(&z, &z, &m, &m).unwrap(), 0.0);

        // every source cell lands on target cell (0, 0)
        let fs = FlowField::from_fn(4, 4, |x, y| [-(x as f64), -(y as f64)]);
        let ft = FlowField::zeros(4, 4);
        let full = Mask::full(4, 4);
        let v = flow_consistency(&fs, &ft, &full, &full).unwrap();
        assert!(v > 0.0);
        let want = oracle_flow_dir(&full, &fs, &ft) + oracle_flow_dir(&full, &ft, &fs);
        assert!((v - want).abs() < 1e-12);

        for _ in 0..10 {
            let (ms, mt) = (random_mask(&mut rng, 6, 6), random_mask(&mut rng, 6, 6));
            let (fs, ft) = (random_flow(&mut rng, 6, 6, 2.0), random_flow(&mut rng, 6, 6, 2.0));
            let want = oracle_flow_dir(&ms, &fs, &ft) + oracle_flow_dir(&mt, &ft, &fs);
            assert!((flow_consistency(&fs, &ft, &ms, &mt).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_foreground_gives_zero_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (fs, ft) = (random_flow(&mut rng, 4, 4, 1.0), random_flow(&mut rng, 4, 4, 1.0));
        let e = Mask::empty(4, 4);
        assert_eq!(flow_consistency(&fs, &ft, &e, &e).unwrap(), 0.0);
        assert_eq!(smoothness(&fs, &ft, &e, &e).unwrap(), 0.0);
    }

    #[test]
    fn smoothness_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_mask(&mut rng, 5, 5);
        let c = FlowField::uniform(5, 5, [1.5, -0.5]);
        assert_eq!(smoothness(&c, &c, &m, &m).unwrap(), 0.0);

        let ramp = FlowField::from_fn(3, 3, |x, _| [x as f64, 0.0]);
        let full = Mask::full(3, 3);
        // x-differences of 1 in the first two columns of each row: 6 per direction
        let want = 2.0 * 6.0 / 9.0;
        assert!((smoothness(&ramp, &ramp, &full, &full).unwrap() - want).abs() < 1e-15);

        for _ in 0..10 {
            let (ms, mt) = (random_mask(&mut rng, 6, 6), random_mask(&mut rng, 6, 6));
            let (fs, ft) = (random_flow(&mut rng, 6, 6, 2.0), random_flow(&mut rng, 6, 6, 2.0));
            let want = oracle_smooth_dir(&ms, &fs) + oracle_smooth_dir(&mt, &ft);
            assert!((smoothness(&fs, &ft, &ms, &mt).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn total_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_mask(&mut rng, 5, 5);
        let z = FlowField::zeros(5, 5);
        let r = total_loss(&z, &z, &m, &m, &LossWeights::default()).unwrap();
        assert_eq!(r, LossReport::default());

        let (ms, mt) = (random_mask(&mut rng, 6, 6), random_mask(&mut rng, 6, 6));
        let (fs, ft) = (random_flow(&mut rng, 6, 6, 2.0), random_flow(&mut rng, 6, 6, 2.0));
        let only_mask = total_loss(&fs, &ft, &ms, &mt, &LossWeights::new(1.0, 0.0, 0.0).unwrap()).unwrap();
        assert_eq!(only_mask.total, mask_consistency(&ms, &mt, &fs, &ft).unwrap());

        let r = total_loss(&fs, &ft, &ms, &mt, &LossWeights::default()).unwrap();
        let want = 3.0 * mask_consistency(&ms, &mt, &fs, &ft).unwrap()
            + 16.0 * flow_consistency(&fs, &ft, &ms, &mt).unwrap()
            + 0.5 * smoothness(&fs, &ft, &ms, &mt).unwrap();
        assert!((r.total - want).abs() < 1e-9);

        let swapped = total_loss(&ft, &fs, &mt, &ms, &LossWeights::default()).unwrap();
        assert_eq!(swapped.total, r.total);
    }

    #[test]
    fn background_cells_do_not_contribute() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = Mask::from_fn(6, 6, |x, _| x < 3);
        let fs = random_flow(&mut rng, 6, 6, 1.0);
        let ft = random_flow(&mut rng, 6, 6, 1.0);
        let base = loss_terms(&fs, &ft, &LossMasks::new(&m, &m)).unwrap();
        // perturb only background cells that no foreground difference touches
        let fs2 = FlowField::from_fn(6, 6, |x, y| if x >= 4 { [9.0, -9.0] } else { fs.get(x, y) });
        let ft2 = FlowField::from_fn(6, 6, |x, y| if x >= 4 { [9.0, -9.0] } else { ft.get(x, y) });
        let pert = loss_terms(&fs2, &ft2, &LossMasks::new(&m, &m)).unwrap();
        assert_eq!(base.2, pert.2);
    }

    #[test]
    fn region_limits_sums() {
        let full = Mask::full(6, 6);
        let region = interior_region(6, 6, 1);
        assert_eq!(region.foreground_count(), 16);
        // outward flow on the border only; interior terms are unaffected
        let f = FlowField::from_fn(6, 6, |x, y| if region.is_foreground(x, y) { [0.0, 0.0] } else { [3.0, 3.0] });
        let masks = LossMasks::new(&full, &full).within(&region);
        let (m, fl, _) = loss_terms(&f, &f, &masks).unwrap();
        assert_eq!((m, fl), (0.0, 0.0));
    }
}
