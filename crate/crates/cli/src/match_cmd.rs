use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::Args;

use semflow_core::eval::{transfer_mask_pixels, warp_image_pixels};
use semflow_core::features::load_feature_map;
use semflow_core::matching::match_features;
use semflow_core::{Error, FeatureMap, FlowField, Image, Mask};

use crate::config::{write_file, MatchFlags};

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// Source image (PGM/PPM) or feature map (.sfnf)
    #[arg(long)]
    pub src: PathBuf,
    /// Target image (PGM/PPM) or feature map (.sfnf)
    #[arg(long)]
    pub tgt: PathBuf,
    /// Optional second-level source features (.sfnf), combined with --src [default: none]
    #[arg(long, requires = "tgt_coarse")]
    pub src_coarse: Option<PathBuf>,
    /// Optional second-level target features (.sfnf), combined with --tgt [default: none]
    #[arg(long, requires = "src_coarse")]
    pub tgt_coarse: Option<PathBuf>,
    /// Output path for the source-to-target flow (SFFL)
    #[arg(long)]
    pub out_src_flow: PathBuf,
    /// Output path for the target-to-source flow (SFFL)
    #[arg(long)]
    pub out_tgt_flow: PathBuf,
    /// Write the source image warped into the target frame here [default: none]
    #[arg(long)]
    pub warp_image: Option<PathBuf>,
    /// Source mask (PGM) to warp into the target frame [default: none]
    #[arg(long, requires = "warp_mask")]
    pub src_mask: Option<PathBuf>,
    /// Output path for the warped source mask (PGM) [default: none]
    #[arg(long, requires = "src_mask")]
    pub warp_mask: Option<PathBuf>,
    #[command(flatten)]
    pub flags: MatchFlags,
}

fn is_features(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("sfnf"))
}

fn feature_levels(first: &Path, second: Option<&PathBuf>) -> Result<Vec<FeatureMap>> {
    let mut levels = vec![load_feature_map(first)?];
    if let Some(p) = second {
        let f = load_feature_map(p)?;
        let (h, w) = (levels[0].h(), levels[0].w());
        levels.push(if (f.h(), f.w()) == (h, w) { f } else { f.resized(h, w) });
    }
    Ok(levels)
}

pub fn run(a: MatchArgs) -> Result<u8> {
    let cfg = a.flags.resolve()?;
    let (fs, ft, images) = match (is_features(&a.src), is_features(&a.tgt)) {
        (true, true) => {
            let s = feature_levels(&a.src, a.src_coarse.as_ref())?;
            let t = feature_levels(&a.tgt, a.tgt_coarse.as_ref())?;
            let (fs, ft) = match_features(&s, &t, &cfg.matching)?;
            (fs, ft, None)
        }
        (false, false) => {
            if a.src_coarse.is_some() {
                bail!(Error::Invalid("--src-coarse only applies to feature inputs".into()));
            }
            let src = Image::load(&a.src)?;
            let tgt = Image::load(&a.tgt)?;
            let (fs, ft) = cfg.matcher()?.match_images(&src, &tgt)?;
            (fs, ft, Some((src, tgt)))
        }
        _ => bail!(Error::Invalid("--src and --tgt must both be images or both be feature maps".into())),
    };
    write_flow(&a.out_src_flow, &fs)?;
    write_flow(&a.out_tgt_flow, &ft)?;

    if a.warp_image.is_some() || a.warp_mask.is_some() {
        let Some((src, tgt)) = &images else {
            bail!(Error::Invalid("warped outputs need image inputs".into()));
        };
        let tgt_dims = (tgt.h(), tgt.w());
        if let Some(out) = &a.warp_image {
            write_file(out, &warp_image_pixels(src, &ft, tgt_dims)?.to_pnm_bytes())?;
        }
        if let (Some(mask_path), Some(out)) = (&a.src_mask, &a.warp_mask) {
            let mask = Mask::load(mask_path)?;
            if mask.dims() != (src.h(), src.w()) {
                bail!(Error::Shape(format!(
                    "{}: mask is {:?}, source image is {}x{}",
                    mask_path.display(),
                    mask.dims(),
                    src.h(),
                    src.w()
                )));
            }
            write_file(out, &transfer_mask_pixels(&mask, &ft, tgt_dims)?.to_pgm_bytes())?;
        }
    }
    Ok(0)
}

fn write_flow(path: &Path, f: &FlowField) -> Result<()> {
    write_file(path, &f.to_sffl_bytes())
}
