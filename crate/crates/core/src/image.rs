//! 8-bit images and foreground masks, with binary PGM/PPM I/O.

use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::geometry::{bilinear_taps, check_same_dims, ScalarGrid};

/// Interleaved 8-bit samples, 1 (gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    h: usize,
    w: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(h: usize, w: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Invalid(format!("empty image {h}x{w}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Invalid(format!("unsupported channel count {channels}")));
        }
        if data.len() != h * w * channels {
            return Err(shape_err!("image {h}x{w}x{channels} needs {} bytes, got {}", h * w * channels, data.len()));
        }
        Ok(Self { h, w, channels, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.w + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Samples as `f64` in `[0, 1]`, interleaved.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 255.0).collect()
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.h {
            for x in (0..self.w).rev() {
                data.extend_from_slice(self.pixel(x, y));
            }
        }
        Image { data, ..*self }
    }

    pub fn to_pnm_bytes(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.w, self.h).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_pnm_bytes(bytes: &[u8]) -> Result<Self> {
        let (magic, w, h, maxval, offset) = parse_pnm_header(bytes)?;
        let channels = match magic {
            "P5" => 1,
            "P6" => 3,
            other => return Err(Error::Format(format!("unsupported PNM type {other}; expected P5 or P6"))),
        };
        if maxval == 0 || maxval > 255 {
            return Err(Error::Format(format!("maxval {maxval} not supported (8-bit only)")));
        }
        let need = w * h * channels;
        let payload = &bytes[offset..];
        if payload.len() < need {
            return Err(Error::Format(format!("truncated pixel data: need {need} bytes, found {}", payload.len())));
        }
        let data = if maxval == 255 {
            payload[..need].to_vec()
        } else {
            payload[..need].iter().map(|&v| ((v as u32 * 255 + maxval / 2) / maxval).min(255) as u8).collect()
        };
        Image::new(h, w, channels, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pnm_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pnm_bytes(&bytes).map_err(|e| e.in_file(path))
    }
}

fn parse_pnm_header(bytes: &[u8]) -> Result<(&'static str, usize, usize, u32, usize)> {
    let mut pos = 0;
    let mut tokens: Vec<String> = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PNM header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let magic = match tokens[0].as_str() {
        "P5" => "P5",
        "P6" => "P6",
        other => return Err(Error::Format(format!("bad PNM magic {other:?}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM header field {s:?}")));
    let w = num(&tokens[1])?;
    let h = num(&tokens[2])?;
    let maxval = num(&tokens[3])? as u32;
    if w == 0 || h == 0 {
        return Err(Error::Format("PNM with zero dimension".into()));
    }
    Ok((magic, w, h, maxval, pos.min(bytes.len())))
}

/// Foreground map with values in `[0, 1]`: binary when loaded, fractional
/// after warping. Cells above 0.5 count as foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl Mask {
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Invalid(format!("empty mask {h}x{w}")));
        }
        if values.len() != h * w {
            return Err(shape_err!("mask {h}x{w} needs {} values, got {}", h * w, values.len()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("mask values must lie in [0, 1]".into()));
        }
        Ok(Self { h, w, values })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                values.push(if f(x, y) { 1.0 } else { 0.0 });
            }
        }
        Self { h, w, values }
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self { h, w, values: vec![1.0; h * w] }
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Self { h, w, values: vec![0.0; h * w] }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.w + x]
    }

    pub fn is_foreground(&self, x: usize, y: usize) -> bool {
        self.get(x, y) > 0.5
    }

    /// `N`: every cell.
    pub fn pixel_count(&self) -> usize {
        self.values.len()
    }

    /// `N_F`: cells above 0.5.
    pub fn foreground_count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.5).count()
    }

    /// Thresholds at 0.5.
    pub fn binarized(&self) -> Mask {
        Mask { h: self.h, w: self.w, values: self.values.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect() }
    }

    pub fn to_grid(&self) -> ScalarGrid {
        ScalarGrid::new(self.h, self.w, self.values.clone()).expect("mask values are finite")
    }

    /// Wraps a warped grid, clamping into `[0, 1]`.
    pub fn from_grid(g: &ScalarGrid) -> Mask {
        Mask { h: g.h(), w: g.w(), values: g.values().iter().map(|v| v.clamp(0.0, 1.0)).collect() }
    }

    /// Element-wise product.
    pub fn intersect(&self, other: &Mask) -> Result<Mask> {
        check_same_dims(self.dims(), other.dims(), "mask product")?;
        Ok(Mask { h: self.h, w: self.w, values: self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect() })
    }

    pub fn flip_horizontal(&self) -> Mask {
        let mut values = Vec::with_capacity(self.values.len());
        for y in 0..self.h {
            for x in (0..self.w).rev() {
                values.push(self.get(x, y));
            }
        }
        Mask { values, ..*self }
    }

    /// Area-averages onto an `h x w` grid covering the same extent, then
    /// thresholds at 0.5.
    pub fn downsample(&self, h: usize, w: usize) -> Mask {
        let avg = area_resample(&self.values, self.h, self.w, 1, h, w);
        Mask { h, w, values: avg.into_iter().map(|v| if v > 0.5 { 1.0 } else { 0.0 }).collect() }
    }

    /// Samples the mask bilinearly at a continuous cell coordinate (zero
    /// outside).
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        bilinear_taps(self.h, self.w, x, y).iter().map(|t| t.weight * self.values[t.index]).sum()
    }

    /// Foreground bounding box `(x0, y0, x1, y1)` with exclusive upper
    /// bounds, or `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.is_foreground(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                    });
                }
            }
        }
        bb
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let data = self.values.iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
        Image { h: self.h, w: self.w, channels: 1, data }.to_pnm_bytes()
    }

    /// Reads a P5 file; samples above 127 are foreground.
    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self> {
        let img = Image::from_pnm_bytes(bytes)?;
        if img.channels != 1 {
            return Err(Error::Format("mask must be a grayscale (P5) image".into()));
        }
        Ok(Mask { h: img.h, w: img.w, values: img.data.iter().map(|&v| if v > 127 { 1.0 } else { 0.0 }).collect() })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm_bytes(&bytes).map_err(|e| e.in_file(path))
    }
}

/// Exact box-filter resampling of an interleaved `h x w x c` array onto
/// `oh x ow` (fractional cell overlaps are weighted by area).
pub fn area_resample(data: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    let xw = overlap_weights(w, ow);
    let yw = overlap_weights(h, oh);
    let mut out = vec![0.0; oh * ow * c];
    for (oy, ys) in yw.iter().enumerate() {
        for (ox, xs) in xw.iter().enumerate() {
            let dst = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for &(sy, wy) in ys {
                for &(sx, wx) in xs {
                    let src = &data[(sy * w + sx) * c..(sy * w + sx + 1) * c];
                    for (o, v) in dst.iter_mut().zip(src) {
                        *o += wy * wx * v;
                    }
                }
            }
        }
    }
    out
}

/// For each output cell, the input cells it overlaps and the normalized
/// overlap lengths.
fn overlap_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let a = o as f64 * scale;
            let b = (o + 1) as f64 * scale;
            let mut cells = Vec::new();
            let mut i = a.floor() as usize;
            while (i as f64) < b && i < n_in {
                let lo = a.max(i as f64);
                let hi = b.min((i + 1) as f64);
                if hi > lo {
                    cells.push((i, (hi - lo) / scale));
                }
                i += 1;
            }
            cells
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip_with_comments() {
        let img = Image::new(2, 3, 3, (0..18).map(|v| v as u8 * 10).collect()).unwrap();
        assert_eq!(Image::from_pnm_bytes(&img.to_pnm_bytes()).unwrap(), img);
        let mut with_comment = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        with_comment.extend_from_slice(&[7, 200]);
        let g = Image::from_pnm_bytes(&with_comment).unwrap();
        assert_eq!(g.data(), &[7, 200]);
    }

    #[test]
    fn pnm_errors() {
        assert!(matches!(Image::from_pnm_bytes(b"P3\n1 1\n255\n1 2 3"), Err(Error::Format(_))));
        assert!(matches!(Image::from_pnm_bytes(b"P5\n4 4\n255\n\x00"), Err(Error::Format(_))));
        assert!(matches!(Image::from_pnm_bytes(b"P5\n4"), Err(Error::Format(_))));
    }

    #[test]
    fn mask_threshold_at_127() {
        let mut bytes = b"P5\n3 1\n255\n".to_vec();
        bytes.extend_from_slice(&[127, 128, 255]);
        let m = Mask::from_pgm_bytes(&bytes).unwrap();
        assert_eq!(m.values(), &[0.0, 1.0, 1.0]);
        assert_eq!(m.foreground_count(), 2);
        assert_eq!(m.pixel_count(), 3);
    }

    #[test]
    fn downsample_by_area() {
        // 4x4 with the left 3 columns set: 2x2 cells see 1.0 and 0.5
        let m = Mask::from_fn(4, 4, |x, _| x < 3);
        let d = m.downsample(2, 2);
        assert_eq!(d.values(), &[1.0, 0.0, 1.0, 0.0]);
        let r = area_resample(m.values(), 4, 4, 1, 2, 2);
        assert_eq!(r, vec![1.0, 0.5, 1.0, 0.5]);
    }

    #[test]
    fn non_integer_area_weights_sum_to_one() {
        let ones = vec![1.0; 7 * 5];
        for v in area_resample(&ones, 7, 5, 1, 3, 2) {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bounding_box_and_flip() {
        let m = Mask::from_fn(5, 6, |x, y| (1..3).contains(&x) && (2..5).contains(&y));
        assert_eq!(m.bounding_box(), Some((1, 2, 3, 5)));
        assert_eq!(m.flip_horizontal().bounding_box(), Some((3, 2, 5, 5)));
        assert_eq!(m.flip_horizontal().flip_horizontal(), m);
        assert_eq!(Mask::empty(2, 2).bounding_box(), None);
    }
}
