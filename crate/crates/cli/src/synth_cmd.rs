use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use semflow_core::eval::synthetic_keypoints;
use semflow_core::synth::{augment_flip, generate_pair, item_seed, procedural_image};
use semflow_core::{AffineRanges, AffineTransform, Image, Mask};

use crate::config::{read_json, write_file, write_json};
use crate::eval_cmd::PairRow;
use crate::train_cmd::{load_corpus, ManifestEntry};

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Write a procedural image corpus and its manifest.
    Corpus(CorpusArgs),
    /// Write affine-warped evaluation pairs with ground-truth flow and keypoints.
    Pairs(PairsArgs),
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Number of images
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    /// Corpus seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image side length in pixels
    #[arg(long, default_value_t = 160)]
    pub size: usize,
    /// Output directory; receives images, masks and manifest.json
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct PairsArgs {
    /// Corpus manifest: JSON list of {"image": path, "mask": path}
    #[arg(long)]
    pub manifest: PathBuf,
    /// Pairs drawn from each corpus image
    #[arg(long, default_value_t = 1)]
    pub per_image: usize,
    /// Pair seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keypoints per pair
    #[arg(long, default_value_t = 50)]
    pub keypoints: usize,
    /// Ground-truth flow grid size, rows and columns
    #[arg(long, default_value_t = 20)]
    pub grid: usize,
    /// Mirror every other pair left-right [default: off]
    #[arg(long)]
    pub flip: bool,
    /// JSON file with transform ranges (rotation_deg, scale, translation,
    /// shear as [min, max]) [default: ±15°, 0.85..1.15, ±0.1, ±0.1]
    #[arg(long)]
    pub ranges: Option<PathBuf>,
    /// Output directory; receives one folder per pair, pairs.csv and gt_pairs.csv
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn run(c: SynthCommand) -> Result<u8> {
    match c {
        SynthCommand::Corpus(a) => run_corpus(a),
        SynthCommand::Pairs(a) => run_pairs(a),
    }
}

fn image_ext(img: &Image) -> &'static str {
    if img.channels() == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

fn run_corpus(a: CorpusArgs) -> Result<u8> {
    let entries: Vec<ManifestEntry> = (0..a.count)
        .into_par_iter()
        .map(|i| {
            let (img, mask) = procedural_image(item_seed(a.seed, i as u64), a.size);
            let image = PathBuf::from(format!("img_{i:04}.{}", image_ext(&img)));
            let mask_path = PathBuf::from(format!("img_{i:04}_mask.pgm"));
            write_file(&a.out_dir.join(&image), &img.to_pnm_bytes())?;
            write_file(&a.out_dir.join(&mask_path), &mask.to_pgm_bytes())?;
            Ok(ManifestEntry { image, mask: mask_path })
        })
        .collect::<Result<_>>()?;
    write_json(&a.out_dir.join("manifest.json"), &entries)?;
    Ok(0)
}

#[derive(Serialize)]
struct PairMeta<'a> {
    corpus_index: usize,
    seed: u64,
    flipped: bool,
    transform: &'a AffineTransform,
}

fn save_image(dir: &Path, stem: &str, img: &Image) -> Result<String> {
    let name = format!("{stem}.{}", image_ext(img));
    write_file(&dir.join(&name), &img.to_pnm_bytes())?;
    Ok(name)
}

fn save_mask(dir: &Path, name: &str, m: &Mask) -> Result<String> {
    write_file(&dir.join(name), &m.to_pgm_bytes())?;
    Ok(name.to_string())
}

fn run_pairs(a: PairsArgs) -> Result<u8> {
    let ranges: AffineRanges = match &a.ranges {
        Some(p) => read_json(p)?,
        None => AffineRanges::default(),
    };
    ranges.validate()?;
    let corpus = load_corpus(&a.manifest)?;
    let jobs: Vec<(usize, usize)> = (0..corpus.len()).flat_map(|i| (0..a.per_image).map(move |j| (i, j))).collect();
    let rows: Vec<(PairRow, PairRow)> = jobs
        .par_iter()
        .enumerate()
        .map(|(k, &(i, _))| {
            let seed = item_seed(a.seed, k as u64);
            let (img, mask) = &corpus[i];
            let mut pair = generate_pair(img, mask, seed, &ranges, (a.grid, a.grid))
                .with_context(|| format!("corpus image {i}"))?;
            let flipped = a.flip && k % 2 == 1;
            if flipped {
                pair = augment_flip(&pair);
            }
            let (skp, tkp) = synthetic_keypoints(&pair, a.keypoints, seed)?;
            let name = format!("pair_{k:04}");
            let dir = a.out_dir.join(&name);
            let rel = |f: String| format!("{name}/{f}");
            let meta = PairMeta { corpus_index: i, seed, flipped, transform: &pair.transform };
            write_json(&dir.join("transform.json"), &meta)?;
            write_file(&dir.join("gt_flow.sffl"), &pair.gt_flow.to_sffl_bytes())?;
            write_file(&dir.join("gt_flow_reverse.sffl"), &pair.gt_flow_reverse().to_sffl_bytes())?;
            write_file(&dir.join("src_keypoints.csv"), skp.to_csv().as_bytes())?;
            write_file(&dir.join("tgt_keypoints.csv"), tkp.to_csv().as_bytes())?;
            let bbox = tkp.bbox.map(|b| format!("x0,y0,x1,y1\n{},{},{},{}\n", b.x0, b.y0, b.x1, b.y1));
            if let Some(b) = &bbox {
                write_file(&dir.join("tgt_bbox.csv"), b.as_bytes())?;
            }
            let row = PairRow {
                source: rel(save_image(&dir, "src", &pair.src)?),
                target: rel(save_image(&dir, "tgt", &pair.tgt)?),
                source_keypoints: Some(rel("src_keypoints.csv".into())),
                target_keypoints: Some(rel("tgt_keypoints.csv".into())),
                target_bbox: bbox.map(|_| rel("tgt_bbox.csv".into())),
                source_mask: Some(rel(save_mask(&dir, "src_mask.pgm", &pair.src_mask)?)),
                target_mask: Some(rel(save_mask(&dir, "tgt_mask.pgm", &pair.tgt_mask)?)),
                flow: None,
            };
            let gt = PairRow { flow: Some(rel("gt_flow.sffl".into())), ..row.clone() };
            Ok((row, gt))
        })
        .collect::<Result<_>>()?;
    let (plain, gt): (Vec<PairRow>, Vec<PairRow>) = rows.into_iter().unzip();
    write_pairs(&a.out_dir.join("pairs.csv"), &plain)?;
    write_pairs(&a.out_dir.join("gt_pairs.csv"), &gt)?;
    Ok(0)
}

pub fn write_pairs(path: &Path, rows: &[PairRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    write_file(path, &w.into_inner().context("flushing pair list")?)
}
