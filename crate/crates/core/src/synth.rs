//! Synthetic training pairs from single images: random affine warps, flips,
//! box masks, and a seeded procedural image corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::BBox;
use crate::geometry::{affine_to_flow, bilinear_taps, check_same_dims, AffineTransform, FlowField, GridPoint};
use crate::image::{Image, Mask};

/// Sampling bounds for random affine transforms, each an inclusive
/// `[min, max]` pair. Translation is a fraction of the frame size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffineRanges {
    pub rotation_deg: [f64; 2],
    pub scale: [f64; 2],
    pub translation: [f64; 2],
    pub shear: [f64; 2],
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self { rotation_deg: [-15.0, 15.0], scale: [0.85, 1.15], translation: [-0.1, 0.1], shear: [-0.1, 0.1] }
    }
}

impl AffineRanges {
    pub fn identity() -> Self {
        Self { rotation_deg: [0.0; 2], scale: [1.0; 2], translation: [0.0; 2], shear: [0.0; 2] }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("rotation_deg", self.rotation_deg),
            ("scale", self.scale),
            ("translation", self.translation),
            ("shear", self.shear),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Invalid(format!("affine range {name} = [{lo}, {hi}] is not an interval")));
            }
        }
        if self.scale[0] <= 0.0 {
            return Err(Error::Invalid("scale range must be positive".into()));
        }
        Ok(())
    }

    /// A transform in pixel coordinates of an `h x w` frame, built about the
    /// frame centre: translate ∘ rotate ∘ scale ∘ shear.
    pub fn sample(&self, rng: &mut impl Rng, h: usize, w: usize) -> Result<AffineTransform> {
        let theta = draw(rng, self.rotation_deg).to_radians();
        let s = draw(rng, self.scale);
        let sh = draw(rng, self.shear);
        let tx = draw(rng, self.translation) * w as f64;
        let ty = draw(rng, self.translation) * h as f64;
        let c = GridPoint::new((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (sin, cos) = theta.sin_cos();
        let lin = AffineTransform::new(s * cos, s * (cos * sh - sin), s * sin, s * (sin * sh + cos), 0.0, 0.0)?;
        Ok(AffineTransform::translation(c.x + tx, c.y + ty)
            .compose(&lin)
            .compose(&AffineTransform::translation(-c.x, -c.y)))
    }
}

fn draw(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// A source image and its affine-warped copy, with ground-truth flow at the
/// working grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    pub src: Image,
    pub tgt: Image,
    pub src_mask: Mask,
    pub tgt_mask: Mask,
    /// `transform(p) - p` on the working grid.
    pub gt_flow: FlowField,
    /// Source-to-target map in pixel coordinates.
    pub transform: AffineTransform,
}

impl SynthPair {
    /// Both masks area-averaged onto the flow grid.
    pub fn grid_masks(&self) -> (Mask, Mask) {
        let (h, w) = (self.gt_flow.h(), self.gt_flow.w());
        (self.src_mask.downsample(h, w), self.tgt_mask.downsample(h, w))
    }

    /// Target-to-source ground truth on the working grid.
    pub fn gt_flow_reverse(&self) -> FlowField {
        let dims = (self.src.h(), self.src.w());
        let grid = (self.gt_flow.h(), self.gt_flow.w());
        affine_to_flow(&self.transform.inverse().rescaled(dims, grid), grid.0, grid.1).expect("non-empty grid")
    }
}

/// Renders `img` under `t` by inverse mapping: `out(q) = img(t⁻¹(q))`,
/// bilinear, black outside.
pub fn warp_image(img: &Image, t: &AffineTransform) -> Image {
    let inv = t.inverse();
    let (h, w, c) = (img.h(), img.w(), img.channels());
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let p = inv.apply(GridPoint::new(x as f64, y as f64));
            let mut acc = [0.0; 3];
            for tap in bilinear_taps(h, w, p.x, p.y).iter() {
                for (ch, a) in acc.iter_mut().enumerate().take(c) {
                    *a += tap.weight * img.data()[tap.index * c + ch] as f64;
                }
            }
            data.extend(acc[..c].iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
    }
    Image::new(h, w, c, data).expect("same dims")
}

/// `out(q) = mask(t⁻¹(q))`, binarized at 0.5.
pub fn warp_mask(mask: &Mask, t: &AffineTransform) -> Mask {
    let inv = t.inverse();
    Mask::from_fn(mask.h(), mask.w(), |x, y| {
        let p = inv.apply(GridPoint::new(x as f64, y as f64));
        mask.sample(p.x, p.y) > 0.5
    })
}

pub const MAX_ATTEMPTS: usize = 10;

/// Warps `img`/`mask` by a transform drawn from `ranges`. Transforms that
/// keep less than half of the foreground in frame are redrawn, at most
/// [`MAX_ATTEMPTS`] times.
pub fn generate_pair(
    img: &Image,
    mask: &Mask,
    seed: u64,
    ranges: &AffineRanges,
    grid: (usize, usize),
) -> Result<SynthPair> {
    check_same_dims((img.h(), img.w()), mask.dims(), "image and mask")?;
    ranges.validate()?;
    if grid.0 == 0 || grid.1 == 0 {
        return Err(Error::Invalid("empty working grid".into()));
    }
    let mask = mask.binarized();
    let fg = mask.foreground_count();
    if fg == 0 {
        return Err(Error::Invalid("source mask has no foreground".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = (img.h(), img.w());
    for _ in 0..MAX_ATTEMPTS {
        let t = ranges.sample(&mut rng, dims.0, dims.1)?;
        let tgt_mask = warp_mask(&mask, &t);
        if 2 * tgt_mask.foreground_count() < fg {
            continue;
        }
        let gt_flow = affine_to_flow(&t.rescaled(dims, grid), grid.0, grid.1)?;
        return Ok(SynthPair {
            src: img.clone(),
            tgt: warp_image(img, &t),
            src_mask: mask,
            tgt_mask,
            gt_flow,
            transform: t,
        });
    }
    Err(Error::Invalid(format!("no transform kept half the foreground in {MAX_ATTEMPTS} attempts (seed {seed})")))
}

/// Mirrors a pair left-right; the flow is re-indexed and its x component
/// negated.
pub fn augment_flip(pair: &SynthPair) -> SynthPair {
    let f = &pair.gt_flow;
    let w = f.w();
    let gt_flow = FlowField::from_fn(f.h(), w, |x, y| {
        let v = f.get(w - 1 - x, y);
        [-v[0], v[1]]
    });
    let pw = pair.src.w() as f64 - 1.0;
    let mirror = AffineTransform::new(-1.0, 0.0, 0.0, 1.0, pw, 0.0).expect("invertible");
    SynthPair {
        src: pair.src.flip_horizontal(),
        tgt: pair.tgt.flip_horizontal(),
        src_mask: pair.src_mask.flip_horizontal(),
        tgt_mask: pair.tgt_mask.flip_horizontal(),
        gt_flow,
        transform: mirror.compose(&pair.transform).compose(&mirror),
    }
}

/// Union of filled half-open pixel rectangles.
pub fn boxes_to_masks(boxes: &[BBox], h: usize, w: usize) -> Result<Mask> {
    if h == 0 || w == 0 {
        return Err(Error::Invalid(format!("empty mask {h}x{w}")));
    }
    if boxes.is_empty() {
        log::warn!("no boxes given; returning an empty mask");
    }
    for b in boxes {
        b.validate()?;
        if b.x1 > w as f64 || b.y1 > h as f64 {
            return Err(Error::Invalid(format!("box {b:?} exceeds the {h}x{w} frame")));
        }
    }
    Ok(Mask::from_fn(h, w, |x, y| boxes.iter().any(|b| b.contains_pixel(x, y))))
}

/// Seed of item `i` in a corpus drawn from `seed`.
pub fn item_seed(seed: u64, i: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i.wrapping_mul(0xD1B5_4A32_D192_ED03)) ^ 0x5851_F42D
}

/// Deterministic textured blobs on cluttered backgrounds, with exact masks.
pub fn procedural_corpus(count: usize, seed: u64, size: usize) -> Vec<(Image, Mask)> {
    (0..count).map(|i| procedural_image(item_seed(seed, i as u64), size)).collect()
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)]
}

/// One procedural image: a smooth random background with rectangles and
/// discs, and a star-shaped object filled with oriented stripes and spots.
pub fn procedural_image(seed: u64, size: usize) -> (Image, Mask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut px = vec![[0.0f64; 3]; size * size];

    let (c0, c1) = (random_color(&mut rng), random_color(&mut rng));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    for y in 0..size {
        for x in 0..size {
            let t = ((x as f64 * dx + y as f64 * dy) / s).clamp(-1.0, 1.0) * 0.5 + 0.5;
            for c in 0..3 {
                px[y * size + x][c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    for _ in 0..rng.gen_range(8..14) {
        let color = random_color(&mut rng);
        let cx = rng.gen_range(0.0..s);
        let cy = rng.gen_range(0.0..s);
        let r = rng.gen_range(0.04..0.14) * s;
        let disc = rng.gen_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (ex, ey) = (x as f64 - cx, y as f64 - cy);
                let inside = if disc { ex * ex + ey * ey < r * r } else { ex.abs() < r && ey.abs() < 0.6 * r };
                if inside {
                    px[y * size + x] = color;
                }
            }
        }
    }

    let cx = s * rng.gen_range(0.4..0.6);
    let cy = s * rng.gen_range(0.4..0.6);
    let r0 = s * rng.gen_range(0.22..0.3);
    let lobes = rng.gen_range(2..6) as f64;
    let amp = rng.gen_range(0.05..0.25);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (f0, f1) = (random_color(&mut rng), random_color(&mut rng));
    let period = s * rng.gen_range(0.06..0.12);
    let stripe: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (sx, sy) = (stripe.cos(), stripe.sin());
    let spots: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.gen_range(3..7))
        .map(|_| {
            let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let d = rng.gen_range(0.0..0.7) * r0;
            (cx + d * a.cos(), cy + d * a.sin(), s * rng.gen_range(0.02..0.05), random_color(&mut rng))
        })
        .collect();

    let mut mask = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (ex, ey) = (x as f64 - cx, y as f64 - cy);
            let radius = r0 * (1.0 + amp * (lobes * ey.atan2(ex) + phase).sin());
            if ex * ex + ey * ey >= radius * radius {
                continue;
            }
            mask[y * size + x] = 1.0;
            let band = ((x as f64 * sx + y as f64 * sy) / period).rem_euclid(1.0) < 0.5;
            let mut color = if band { f0 } else { f1 };
            for &(qx, qy, qr, qc) in &spots {
                if (x as f64 - qx).powi(2) + (y as f64 - qy).powi(2) < qr * qr {
                    color = qc;
                }
            }
            px[y * size + x] = color;
        }
    }

    let data = px.iter().flat_map(|c| c.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)).collect();
    let img = Image::new(size, size, 3, data).expect("sized");
    let mask = Mask::new(size, size, mask).expect("binary");
    (img, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{interior_region, total_loss_masked, LossMasks, LossWeights};

    #[test]
    fn identity_ranges_copy_the_source() {
        let (img, mask) = procedural_image(3, 96);
        let pair = generate_pair(&img, &mask, 11, &AffineRanges::identity(), (12, 12)).unwrap();
        assert_eq!(pair.tgt, pair.src);
        assert_eq!(pair.tgt_mask, pair.src_mask);
        assert!(pair.gt_flow.vectors().iter().all(|v| *v == [0.0, 0.0]));
    }

    #[test]
    fn translation_scales_to_grid() {
        let (img, mask) = procedural_image(4, 320);
        let r = AffineRanges { translation: [0.025, 0.025], ..AffineRanges::identity() };
        let pair = generate_pair(&img, &mask, 0, &r, (20, 20)).unwrap();
        // (8, 8) px: translation draws share one range for x and y
        for v in pair.gt_flow.vectors() {
            assert!((v[0] - 0.5).abs() < 1e-12 && (v[1] - 0.5).abs() < 1e-12);
        }
        let t = AffineTransform::translation(8.0, 0.0);
        let f = affine_to_flow(&t.rescaled((320, 320), (20, 20)), 20, 20).unwrap();
        assert!(f.vectors().iter().all(|v| (v[0] - 0.5).abs() < 1e-12 && v[1].abs() < 1e-12));
    }

    #[test]
    fn regeneration_is_bit_exact() {
        let (img, mask) = procedural_image(5, 128);
        let a = generate_pair(&img, &mask, 99, &AffineRanges::default(), (16, 16)).unwrap();
        let b = generate_pair(&img, &mask, 99, &AffineRanges::default(), (16, 16)).unwrap();
        assert_eq!(a, b);
        let c = generate_pair(&img, &mask, 100, &AffineRanges::default(), (16, 16)).unwrap();
        assert_ne!(a.transform, c.transform);
    }

    #[test]
    fn foreground_retention_and_failure() {
        let (img, mask) = procedural_image(6, 96);
        for seed in 0..20 {
            let p = generate_pair(&img, &mask, seed, &AffineRanges::default(), (12, 12)).unwrap();
            assert!(2 * p.tgt_mask.foreground_count() >= p.src_mask.foreground_count());
        }
        let far = AffineRanges { translation: [2.0, 2.0], ..AffineRanges::identity() };
        assert!(generate_pair(&img, &mask, 0, &far, (12, 12)).is_err());
        assert!(generate_pair(&img, &Mask::empty(96, 96), 0, &AffineRanges::default(), (12, 12)).is_err());
        assert!(generate_pair(&img, &Mask::full(90, 96), 0, &AffineRanges::default(), (12, 12)).is_err());
    }

    #[test]
    fn flip_examples() {
        let (img, mask) = procedural_image(7, 96);
        let p = generate_pair(&img, &mask, 1, &AffineRanges::default(), (12, 12)).unwrap();
        assert_eq!(augment_flip(&augment_flip(&p)), p);

        let u = SynthPair { gt_flow: FlowField::uniform(12, 12, [1.0, 0.0]), ..p.clone() };
        assert!(augment_flip(&u).gt_flow.vectors().iter().all(|v| *v == [-1.0, 0.0]));

        let f = augment_flip(&p);
        let direct = affine_to_flow(&f.transform.rescaled((96, 96), (12, 12)), 12, 12).unwrap();
        assert!(direct.max_distance(&f.gt_flow).unwrap() < 1e-9);
    }

    #[test]
    fn flipped_flow_reconstructs_flipped_mask() {
        let (img, mask) = procedural_image(8, 160);
        let p = augment_flip(&generate_pair(&img, &mask, 2, &AffineRanges::default(), (20, 20)).unwrap());
        let (ms, mt) = p.grid_masks();
        let region = interior_region(20, 20, 2).intersect(&ms).unwrap();
        let masks = LossMasks { src: &ms, tgt: &mt, region: Some(&region) };
        let w = LossWeights::new(1.0, 0.0, 0.0).unwrap();
        let fs = p.gt_flow.clone();
        let ft = p.gt_flow_reverse();
        let r = total_loss_masked(&fs, &ft, &masks, &w).unwrap();
        assert!(r.total < 0.1, "{r:?}");
    }

    #[test]
    fn boxes_examples() {
        let full = boxes_to_masks(&[BBox::new(0.0, 0.0, 8.0, 6.0).unwrap()], 6, 8).unwrap();
        assert_eq!(full, Mask::full(6, 8));
        let two = [BBox::new(0.0, 0.0, 2.0, 2.0).unwrap(), BBox::new(4.0, 3.0, 7.0, 5.0).unwrap()];
        assert_eq!(boxes_to_masks(&two, 6, 8).unwrap().foreground_count(), 4 + 6);
        let overlap = [BBox::new(0.0, 0.0, 4.0, 4.0).unwrap(), BBox::new(2.0, 2.0, 6.0, 5.0).unwrap()];
        assert_eq!(boxes_to_masks(&overlap, 6, 8).unwrap().foreground_count(), 16 + 12 - 4);
        assert_eq!(boxes_to_masks(&[], 3, 3).unwrap(), Mask::empty(3, 3));
        assert!(boxes_to_masks(&[BBox::new(0.0, 0.0, 9.0, 1.0).unwrap()], 6, 8).is_err());
    }

    #[test]
    fn corpus_is_deterministic_and_nonempty() {
        let a = procedural_corpus(3, 42, 64);
        let b = procedural_corpus(3, 42, 64);
        assert_eq!(a, b);
        for (img, m) in &a {
            assert!(m.foreground_count() > 64 * 64 / 20);
            assert_eq!((img.h(), img.w(), img.channels()), (64, 64, 3));
        }
        assert_ne!(a[0].0, a[1].0);
    }
}
