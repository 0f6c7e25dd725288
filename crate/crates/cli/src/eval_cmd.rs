use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use semflow_core::eval::{
    load_bbox, mask_transfer_scores, pck, transfer_keypoints, transfer_mask_pixels, BBox, EvalConfig, KeypointSet,
    PckNormalization,
};
use semflow_core::matching::{correlate_levels, flow_from_correlation};
use semflow_core::{CorrelationMap, Error, FlowField, Image, Mask, MatchConfig, Matcher};

use crate::config::{write_file, write_json, MatchFlags, MatchRunConfig};

/// One row of a pair list. Only `source` and `target` are required; paths
/// are relative to the list's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairRow {
    pub source: String,
    pub target: String,
    pub source_keypoints: Option<String>,
    pub target_keypoints: Option<String>,
    pub target_bbox: Option<String>,
    pub source_mask: Option<String>,
    pub target_mask: Option<String>,
    /// Precomputed source-to-target flow (SFFL); matching is skipped.
    pub flow: Option<String>,
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let rows: Vec<PairRow> = rdr
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        bail!(Error::Invalid(format!("{}: no pairs listed", path.display())));
    }
    if rows.iter().any(|r| r.source.is_empty() || r.target.is_empty()) {
        bail!(Error::Format(format!("{}: every row needs source and target", path.display())));
    }
    Ok(rows)
}

fn resolve(base: &Path, p: &Option<String>) -> Option<PathBuf> {
    p.as_deref().filter(|s| !s.is_empty()).map(|s| base.join(s))
}

/// Images and annotations of one listed pair.
pub struct LoadedPair {
    pub src: Image,
    pub tgt: Image,
    pub keypoints: Option<(KeypointSet, KeypointSet)>,
    pub masks: Option<(Mask, Mask)>,
    pub flow: Option<FlowField>,
}

pub fn load_pair(base: &Path, row: &PairRow) -> Result<LoadedPair> {
    let src = Image::load(&base.join(&row.source))?;
    let tgt = Image::load(&base.join(&row.target))?;
    let masks = match (resolve(base, &row.source_mask), resolve(base, &row.target_mask)) {
        (Some(a), Some(b)) => Some((Mask::load(&a)?, Mask::load(&b)?)),
        _ => None,
    };
    let keypoints = match (resolve(base, &row.source_keypoints), resolve(base, &row.target_keypoints)) {
        (Some(a), Some(b)) => {
            let s = KeypointSet::load(&a, src.h(), src.w())?;
            let bbox: Option<BBox> = match resolve(base, &row.target_bbox) {
                Some(p) => Some(load_bbox(&p)?),
                None => masks.as_ref().and_then(|(_, m)| BBox::of_mask(m)),
            };
            let t = KeypointSet::load(&b, tgt.h(), tgt.w())?.with_bbox(bbox);
            Some((s, t))
        }
        _ => None,
    };
    let flow = resolve(base, &row.flow).map(|p| FlowField::load(&p)).transpose()?;
    Ok(LoadedPair { src, tgt, keypoints, masks, flow })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub index: usize,
    pub source: String,
    pub target: String,
    pub status: String,
    pub error: Option<String>,
    pub pck: Option<f64>,
    pub lt_acc: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub pck: Option<f64>,
    pub lt_acc: Option<f64>,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: MatchRunConfig,
    pub pairs: Vec<PairReport>,
    pub mean: MeanMetrics,
    pub evaluated: usize,
    pub failed: usize,
}

fn score_pair(p: &LoadedPair, flow: &FlowField, cfg: &EvalConfig, r: &mut PairReport) -> Result<()> {
    if let Some((s, t)) = &p.keypoints {
        let pred = transfer_keypoints(s, flow, (p.src.h(), p.src.w()), (p.tgt.h(), p.tgt.w()))?;
        r.pck = Some(pck(&pred, t, cfg)?);
    }
    if let Some((ms, mt)) = &p.masks {
        if ms.dims() != (p.src.h(), p.src.w()) || mt.dims() != (p.tgt.h(), p.tgt.w()) {
            bail!(Error::Shape("mask dimensions differ from their images".into()));
        }
        let moved = transfer_mask_pixels(mt, flow, ms.dims())?;
        let s = mask_transfer_scores(ms, &moved)?;
        r.lt_acc = Some(s.lt_acc);
        r.iou = Some(s.iou);
    }
    Ok(())
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn evaluate(rows: &[PairRow], base: &Path, cfg: &MatchRunConfig) -> Result<(EvalReport, Option<anyhow::Error>)> {
    let matcher = cfg.matcher()?;
    let results: Vec<(PairReport, Option<anyhow::Error>)> = rows
        .par_iter()
        .enumerate()
        .map(|(index, row)| {
            let mut r =
                PairReport { index, source: row.source.clone(), target: row.target.clone(), ..Default::default() };
            let outcome = (|| -> Result<()> {
                let p = load_pair(base, row)?;
                let flow = match &p.flow {
                    Some(f) => f.clone(),
                    None => matcher.match_images(&p.src, &p.tgt)?.0,
                };
                score_pair(&p, &flow, &cfg.eval, &mut r)
            })();
            match outcome {
                Ok(()) => {
                    r.status = "ok".into();
                    (r, None)
                }
                Err(e) => {
                    log::warn!("pair {index} ({} -> {}) failed: {e:#}", row.source, row.target);
                    r = PairReport { status: "failed".into(), error: Some(format!("{e:#}")), ..r };
                    (r, Some(e))
                }
            }
        })
        .collect();
    let mut first_error = None;
    let mut pairs = Vec::with_capacity(results.len());
    for (r, e) in results {
        if first_error.is_none() {
            first_error = e;
        }
        pairs.push(r);
    }
    let failed = pairs.iter().filter(|r| r.status != "ok").count();
    let mean = MeanMetrics {
        pck: mean(pairs.iter().map(|r| r.pck)),
        lt_acc: mean(pairs.iter().map(|r| r.lt_acc)),
        iou: mean(pairs.iter().map(|r| r.iou)),
    };
    let report = EvalReport { config: cfg.clone(), evaluated: pairs.len() - failed, failed, pairs, mean };
    Ok((report, first_error))
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// CSV pair list with columns source,target and optionally
    /// source_keypoints,target_keypoints,target_bbox,source_mask,target_mask,flow
    #[arg(long)]
    pub pairs: PathBuf,
    /// JSON report to write
    #[arg(long)]
    pub report: PathBuf,
    /// PCK tolerance alpha [default: 0.1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// PCK normalization: img or bbox [default: bbox]
    #[arg(long)]
    pub normalization: Option<PckNormalization>,
    #[command(flatten)]
    pub flags: MatchFlags,
}

pub fn run_eval(a: EvalArgs) -> Result<u8> {
    let mut cfg = a.flags.resolve()?;
    if let Some(al) = a.alpha {
        cfg.eval.alpha = al;
    }
    if let Some(n) = a.normalization {
        cfg.eval.normalization = n;
    }
    cfg.eval.validate()?;
    let rows = read_pairs(&a.pairs)?;
    let base = a.pairs.parent().unwrap_or(Path::new(""));
    let (report, first_error) = evaluate(&rows, base, &cfg)?;
    write_json(&a.report, &report)?;
    match first_error {
        None => Ok(0),
        Some(e) => {
            eprintln!("error: {} of {} pairs failed; first: {e:#}", report.failed, rows.len());
            Ok(crate::exit_code(&e).max(1))
        }
    }
}

fn check_positive(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
        bail!(Error::Invalid(format!("--{name} values must be positive and finite")));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// CSV pair list with keypoint columns (as for `eval`)
    #[arg(long)]
    pub pairs: PathBuf,
    /// Comma-separated temperatures [default: 10,25,50,75,100]
    #[arg(long, value_delimiter = ',')]
    pub betas: Vec<f64>,
    /// Comma-separated kernel widths in grid cells [default: 1,2.5,5,7.5,10]
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Vec<f64>,
    /// Output CSV: beta,sigma,mean_pck,best
    #[arg(long)]
    pub out: PathBuf,
    /// PCK tolerance alpha [default: 0.1]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// PCK normalization: img or bbox [default: bbox]
    #[arg(long)]
    pub normalization: Option<PckNormalization>,
    #[command(flatten)]
    pub flags: MatchFlags,
}

pub const DEFAULT_BETAS: [f64; 5] = [10.0, 25.0, 50.0, 75.0, 100.0];
pub const DEFAULT_SIGMAS: [f64; 5] = [1.0, 2.5, 5.0, 7.5, 10.0];

struct SweepItem {
    corr: CorrelationMap,
    src: KeypointSet,
    gt: KeypointSet,
    src_dims: (usize, usize),
    tgt_dims: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub beta: f64,
    pub sigma: f64,
    pub mean_pck: f64,
}

/// Mean PCK for every `(beta, sigma)`, rows ordered by beta then sigma.
pub fn sweep(
    rows: &[PairRow],
    base: &Path,
    cfg: &MatchRunConfig,
    betas: &[f64],
    sigmas: &[f64],
) -> Result<Vec<SweepCell>> {
    let matcher: Matcher = cfg.matcher()?;
    let items: Vec<SweepItem> = rows
        .par_iter()
        .map(|row| {
            let p = load_pair(base, row)?;
            let (src, gt) = p.keypoints.ok_or_else(|| {
                Error::Invalid(format!("pair {} -> {} has no keypoint annotations", row.source, row.target))
            })?;
            let corr = correlate_levels(&matcher.features(&p.src)?, &matcher.features(&p.tgt)?)?;
            Ok(SweepItem { corr, src, gt, src_dims: (p.src.h(), p.src.w()), tgt_dims: (p.tgt.h(), p.tgt.w()) })
        })
        .collect::<Result<_>>()?;
    let grid: Vec<(f64, f64)> = betas.iter().flat_map(|&b| sigmas.iter().map(move |&s| (b, s))).collect();
    grid.par_iter()
        .map(|&(beta, sigma)| {
            let mc = MatchConfig { beta, sigma, ..cfg.matching };
            mc.validate()?;
            let mut total = 0.0;
            for it in &items {
                let flow = flow_from_correlation(&it.corr, &mc)?;
                let pred = transfer_keypoints(&it.src, &flow, it.src_dims, it.tgt_dims)?;
                total += pck(&pred, &it.gt, &cfg.eval)?;
            }
            Ok(SweepCell { beta, sigma, mean_pck: total / items.len() as f64 })
        })
        .collect()
}

pub fn run_sweep(a: SweepArgs) -> Result<u8> {
    let mut cfg = a.flags.resolve()?;
    if let Some(al) = a.alpha {
        cfg.eval.alpha = al;
    }
    if let Some(n) = a.normalization {
        cfg.eval.normalization = n;
    }
    cfg.eval.validate()?;
    let pick = |v: Vec<f64>, d: &[f64]| if v.is_empty() { d.to_vec() } else { v };
    let betas = pick(a.betas, &DEFAULT_BETAS);
    let sigmas = pick(a.sigmas, &DEFAULT_SIGMAS);
    check_positive("betas", &betas)?;
    check_positive("sigmas", &sigmas)?;
    let rows = read_pairs(&a.pairs)?;
    let base = a.pairs.parent().unwrap_or(Path::new(""));
    let cells = sweep(&rows, base, &cfg, &betas, &sigmas)?;
    let best = cells.iter().enumerate().fold(0, |b, (i, c)| if c.mean_pck > cells[b].mean_pck { i } else { b });
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["beta", "sigma", "mean_pck", "best"])?;
    for (i, c) in cells.iter().enumerate() {
        w.write_record([
            c.beta.to_string(),
            c.sigma.to_string(),
            c.mean_pck.to_string(),
            u8::from(i == best).to_string(),
        ])?;
    }
    write_file(&a.out, &w.into_inner().context("flushing sweep CSV")?)?;
    Ok(0)
}
