//! Correspondence metrics (PCK, label-transfer accuracy, IoU) and the
//! downstream tasks built on flows: keypoint transfer and propagation, mask
//! transfer, co-segmentation.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::{check_same_dims, rescale_coord, sample_flow_clamped, warp_scalar, FlowField, GridPoint};
use crate::image::{Image, Mask};
use crate::matching::Matcher;
use crate::synth::SynthPair;

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { x0, y0, x1, y1 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let v = [self.x0, self.y0, self.x1, self.y1];
        if v.iter().any(|c| !c.is_finite() || *c < 0.0) || self.x1 <= self.x0 || self.y1 <= self.y0 {
            return Err(Error::Invalid(format!("invalid box {:?}", v)));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        let (x, y) = (x as f64, y as f64);
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn of_mask(m: &Mask) -> Option<BBox> {
        m.bounding_box().map(|(x0, y0, x1, y1)| BBox { x0: x0 as f64, y0: y0 as f64, x1: x1 as f64, y1: y1 as f64 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: String,
    pub x: f64,
    pub y: f64,
}

/// Named pixel-coordinate keypoints of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: Vec<Keypoint>,
    pub image_h: usize,
    pub image_w: usize,
    pub bbox: Option<BBox>,
}

impl KeypointSet {
    /// Checks that names are unique and every point lies in
    /// `[0, w) x [0, h)`.
    pub fn new(points: Vec<Keypoint>, image_h: usize, image_w: usize, bbox: Option<BBox>) -> Result<Self> {
        if image_h == 0 || image_w == 0 {
            return Err(Error::Invalid("keypoints need a non-empty image".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &points {
            if !seen.insert(p.name.as_str()) {
                return Err(Error::Invalid(format!("duplicate keypoint name {:?}", p.name)));
            }
            if !(p.x >= 0.0 && p.x < image_w as f64 && p.y >= 0.0 && p.y < image_h as f64) {
                return Err(Error::Invalid(format!(
                    "keypoint {:?} at ({}, {}) is outside the {image_h}x{image_w} image",
                    p.name, p.x, p.y
                )));
            }
        }
        if let Some(b) = &bbox {
            b.validate()?;
        }
        Ok(Self { points, image_h, image_w, bbox })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn with_bbox(mut self, bbox: Option<BBox>) -> Self {
        self.bbox = bbox;
        self
    }

    /// Reads `name,x,y` rows; a header row with those names is optional.
    pub fn from_csv(text: &str, image_h: usize, image_w: usize) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut points = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Format(format!("keypoint CSV: {e}")))?;
            if rec.len() != 3 {
                return Err(Error::Format(format!("keypoint CSV row {}: expected name,x,y", i + 1)));
            }
            if i == 0 && &rec[0] == "name" && &rec[1] == "x" && &rec[2] == "y" {
                continue;
            }
            let coord = |s: &str| {
                s.parse::<f64>().map_err(|_| Error::Format(format!("keypoint CSV row {}: bad coordinate {s:?}", i + 1)))
            };
            points.push(Keypoint { name: rec[0].to_string(), x: coord(&rec[1])?, y: coord(&rec[2])? });
        }
        KeypointSet::new(points, image_h, image_w, None)
    }

    pub fn load(path: &Path, image_h: usize, image_w: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, image_h, image_w).map_err(|e| e.in_file(path))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,x,y\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.name, p.x, p.y));
        }
        out
    }
}

/// Reads a single `x0,y0,x1,y1` row (optionally preceded by that header).
pub fn parse_bbox_csv(text: &str) -> Result<BBox> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut found = None;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("bbox CSV: {e}")))?;
        if i == 0 && rec.get(0) == Some("x0") {
            continue;
        }
        if rec.len() != 4 || found.is_some() {
            return Err(Error::Format("bbox CSV must hold exactly one x0,y0,x1,y1 row".into()));
        }
        let v: Vec<f64> = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| Error::Format(format!("bbox CSV: bad number {s:?}"))))
            .collect::<Result<_>>()?;
        found = Some(BBox::new(v[0], v[1], v[2], v[3]).map_err(|e| Error::Format(e.to_string()))?);
    }
    found.ok_or_else(|| Error::Format("bbox CSV is empty".into()))
}

pub fn load_bbox(path: &Path) -> Result<BBox> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_bbox_csv(&text).map_err(|e| e.in_file(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PckNormalization {
    /// Coordinates divided by the image height and width.
    Img,
    /// Threshold scaled by the larger bounding-box side.
    Bbox,
}

impl std::str::FromStr for PckNormalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "img" => Ok(PckNormalization::Img),
            "bbox" => Ok(PckNormalization::Bbox),
            other => Err(Error::Invalid(format!("unknown PCK normalization {other:?}"))),
        }
    }
}

impl std::fmt::Display for PckNormalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PckNormalization::Img => "img",
            PckNormalization::Bbox => "bbox",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub alpha: f64,
    pub normalization: PckNormalization,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { alpha: 0.1, normalization: PckNormalization::Bbox }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Moves source keypoints along a working-grid flow into target pixel
/// coordinates. The flow is sampled bilinearly with border clamping; results
/// are clamped into the target frame.
pub fn transfer_keypoints(
    kps: &KeypointSet,
    flow: &FlowField,
    src_dims: (usize, usize),
    tgt_dims: (usize, usize),
) -> Result<KeypointSet> {
    let (sh, sw) = src_dims;
    let (th, tw) = tgt_dims;
    if th == 0 || tw == 0 {
        return Err(Error::Invalid("empty target image".into()));
    }
    if (kps.image_h, kps.image_w) != src_dims {
        return Err(shape_err!("keypoints belong to a {}x{} image, source is {sh}x{sw}", kps.image_h, kps.image_w));
    }
    let mut points = Vec::with_capacity(kps.len());
    for p in &kps.points {
        if !(p.x >= 0.0 && p.x < sw as f64 && p.y >= 0.0 && p.y < sh as f64) {
            return Err(Error::Invalid(format!("keypoint {:?} lies outside the source image", p.name)));
        }
        let (x, y) = corresponding_pixel(p.x, p.y, flow, src_dims, tgt_dims);
        points.push(Keypoint {
            name: p.name.clone(),
            x: x.clamp(0.0, tw as f64 - 1.0),
            y: y.clamp(0.0, th as f64 - 1.0),
        });
    }
    KeypointSet::new(points, th, tw, None)
}

/// Distance threshold and coordinate scale for one evaluation.
fn pck_scale(gt: &KeypointSet, cfg: &EvalConfig) -> Result<(f64, f64, f64)> {
    match cfg.normalization {
        PckNormalization::Img => Ok((cfg.alpha, 1.0 / gt.image_w as f64, 1.0 / gt.image_h as f64)),
        PckNormalization::Bbox => {
            let b = gt.bbox.ok_or_else(|| Error::Invalid("bbox normalization needs a bounding box".into()))?;
            Ok((cfg.alpha * b.width().max(b.height()), 1.0, 1.0))
        }
    }
}

/// Fraction of keypoints whose error is within the threshold (inclusive).
pub fn pck(pred: &KeypointSet, gt: &KeypointSet, cfg: &EvalConfig) -> Result<f64> {
    cfg.validate()?;
    if gt.is_empty() {
        return Err(Error::Invalid("pck of an empty keypoint set".into()));
    }
    if pred.len() != gt.len() {
        return Err(Error::Invalid(format!("{} predicted vs {} ground-truth keypoints", pred.len(), gt.len())));
    }
    let by_name: HashMap<&str, &Keypoint> = pred.points.iter().map(|p| (p.name.as_str(), p)).collect();
    let (thr, sx, sy) = pck_scale(gt, cfg)?;
    let mut hits = 0usize;
    for g in &gt.points {
        let p = by_name
            .get(g.name.as_str())
            .ok_or_else(|| Error::Invalid(format!("no prediction for keypoint {:?}", g.name)))?;
        let d = ((p.x - g.x) * sx).hypot((p.y - g.y) * sy);
        if d <= thr {
            hits += 1;
        }
    }
    Ok(hits as f64 / gt.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskScores {
    pub lt_acc: f64,
    pub iou: f64,
}

/// Label-transfer accuracy over all pixels and foreground IoU; the
/// transferred mask is binarized at 0.5.
pub fn mask_transfer_scores(gt: &Mask, transferred: &Mask) -> Result<MaskScores> {
    check_same_dims(gt.dims(), transferred.dims(), "mask_transfer_scores")?;
    let (mut same, mut inter, mut union) = (0usize, 0usize, 0usize);
    for (&a, &b) in gt.values().iter().zip(transferred.values()) {
        let (a, b) = (a > 0.5, b > 0.5);
        same += (a == b) as usize;
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Ok(MaskScores { lt_acc: same as f64 / gt.pixel_count() as f64, iou })
}

/// `binarize(W(mask; flow))`: brings a mask of the other image into the
/// frame the flow is defined on.
pub fn transfer_mask(mask: &Mask, flow: &FlowField) -> Result<Mask> {
    Ok(Mask::from_grid(&warp_scalar(&mask.to_grid(), flow)?).binarized())
}

/// Target pixel position corresponding to source pixel `(u, v)` under a
/// working-grid flow (sampled with border clamping).
pub fn corresponding_pixel(
    u: f64,
    v: f64,
    flow: &FlowField,
    src_dims: (usize, usize),
    tgt_dims: (usize, usize),
) -> (f64, f64) {
    let (gh, gw) = (flow.h(), flow.w());
    let g = GridPoint::new(rescale_coord(u, src_dims.1, gw), rescale_coord(v, src_dims.0, gh));
    let d = sample_flow_clamped(flow, g);
    (rescale_coord(g.x + d[0], gw, tgt_dims.1), rescale_coord(g.y + d[1], gh, tgt_dims.0))
}

/// Pixel-resolution mask transfer: every pixel of an `src_dims` frame samples
/// `other` at its corresponding position; the result is binarized.
pub fn transfer_mask_pixels(other: &Mask, flow: &FlowField, src_dims: (usize, usize)) -> Result<Mask> {
    if src_dims.0 == 0 || src_dims.1 == 0 {
        return Err(Error::Invalid("empty frame".into()));
    }
    Ok(Mask::from_fn(src_dims.0, src_dims.1, |x, y| {
        let (tx, ty) = corresponding_pixel(x as f64, y as f64, flow, src_dims, other.dims());
        other.sample(tx, ty) > 0.5
    }))
}

/// Renders `other` into an `src_dims` frame along a working-grid flow
/// (bilinear, black outside).
pub fn warp_image_pixels(other: &Image, flow: &FlowField, src_dims: (usize, usize)) -> Result<Image> {
    let (h, w) = src_dims;
    let c = other.channels();
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let (tx, ty) = corresponding_pixel(x as f64, y as f64, flow, src_dims, (other.h(), other.w()));
            let mut acc = [0.0; 3];
            for tap in crate::geometry::bilinear_taps(other.h(), other.w(), tx, ty).iter() {
                for (ch, a) in acc.iter_mut().enumerate().take(c) {
                    *a += tap.weight * other.data()[tap.index * c + ch] as f64;
                }
            }
            data.extend(acc[..c].iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
    }
    Image::new(h, w, c, data)
}

/// Keeps the predicted foreground that agrees with the other image's
/// prediction warped along the flow.
pub fn cosegment(pred_src: &Mask, pred_tgt: &Mask, fs: &FlowField, ft: &FlowField) -> Result<(Mask, Mask)> {
    check_same_dims(pred_src.dims(), pred_tgt.dims(), "cosegment masks")?;
    let src = pred_src.intersect(&transfer_mask(pred_tgt, fs)?)?;
    let tgt = pred_tgt.intersect(&transfer_mask(pred_src, ft)?)?;
    Ok((src, tgt))
}

/// Chains frame-to-frame matches; the first entry is `kps0` itself.
pub fn propagate_keypoints(frames: &[Image], kps0: &KeypointSet, matcher: &Matcher) -> Result<Vec<KeypointSet>> {
    if frames.len() < 2 {
        return Err(Error::Invalid("propagation needs at least two frames".into()));
    }
    let mut out = vec![kps0.clone()];
    let mut feats = matcher.features(&frames[0])?;
    for pair in frames.windows(2) {
        let next = matcher.features(&pair[1])?;
        let c = crate::matching::correlate_levels(&feats, &next)?;
        let flow = crate::matching::flow_from_correlation(&c, &matcher.config)?;
        let prev = out.last().expect("non-empty");
        let moved = transfer_keypoints(prev, &flow, (pair[0].h(), pair[0].w()), (pair[1].h(), pair[1].w()))?;
        out.push(moved.with_bbox(kps0.bbox));
        feats = next;
    }
    Ok(out)
}

/// Up to `max_points` source keypoints on the pair's foreground whose
/// transformed position stays inside the target frame, and their
/// ground-truth target positions. The ground truth carries the target mask's
/// bounding box.
pub fn synthetic_keypoints(pair: &SynthPair, max_points: usize, seed: u64) -> Result<(KeypointSet, KeypointSet)> {
    let (h, w) = (pair.src.h(), pair.src.w());
    let step = (h.min(w) / 32).max(1);
    let mut cand = Vec::new();
    for y in (step / 2..h).step_by(step) {
        for x in (step / 2..w).step_by(step) {
            if !pair.src_mask.is_foreground(x, y) {
                continue;
            }
            let q = pair.transform.apply(GridPoint::new(x as f64, y as f64));
            if q.x >= 0.0 && q.x <= w as f64 - 1.0 && q.y >= 0.0 && q.y <= h as f64 - 1.0 {
                cand.push((x, y, q));
            }
        }
    }
    if cand.is_empty() {
        return Err(Error::Invalid("no foreground keypoint survives the transform".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cand.shuffle(&mut rng);
    cand.truncate(max_points);
    let mut src = Vec::with_capacity(cand.len());
    let mut gt = Vec::with_capacity(cand.len());
    for (i, (x, y, q)) in cand.into_iter().enumerate() {
        let name = format!("kp{i}");
        src.push(Keypoint { name: name.clone(), x: x as f64, y: y as f64 });
        gt.push(Keypoint { name, x: q.x, y: q.y });
    }
    let bbox = BBox::of_mask(&pair.tgt_mask);
    Ok((KeypointSet::new(src, h, w, None)?, KeypointSet::new(gt, h, w, bbox)?))
}
