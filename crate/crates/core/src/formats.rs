//! Little-endian binary blobs: a 4-byte magic, `u32` dimensions, then `f32`
//! payload values in row-major order.
//!
//! - `SFFL` (flow fields): dims `h, w`; payload `h·w` pairs `(dx, dy)`.
//! - `SFNF` (feature maps, weights): dims `h, w, d`; payload `h·w·d`, channel fastest.

use crate::error::{Error, Result};

pub const FLOW_MAGIC: &[u8; 4] = b"SFFL";
pub const FEATURE_MAGIC: &[u8; 4] = b"SFNF";

pub fn encode(magic: &[u8; 4], dims: &[usize], values: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + 4 * dims.iter().product::<usize>());
    out.extend_from_slice(magic);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses a blob with `ndims` header dimensions; the payload holds
/// `product(dims) * per_item` values. Non-finite payloads are rejected.
pub fn decode(bytes: &[u8], magic: &[u8; 4], ndims: usize, per_item: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Format(format!("file too short for a {} header", String::from_utf8_lossy(magic))));
    }
    if &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let dims: Vec<usize> =
        bytes[4..header].chunks_exact(4).map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize).collect();
    if dims.contains(&0) {
        return Err(Error::Format(format!("zero dimension in header {dims:?}")));
    }
    let count = dims
        .iter()
        .try_fold(per_item, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("header dims {dims:?} overflow")))?;
    let payload = &bytes[header..];
    let expected = count.checked_mul(4).ok_or_else(|| Error::Format("payload size overflow".into()))?;
    if payload.len() < expected {
        return Err(Error::Format(format!(
            "truncated payload: header {dims:?} needs {expected} bytes, found {}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Format(format!("{} trailing bytes after payload", payload.len() - expected)));
    }
    let mut values = Vec::with_capacity(count);
    for c in payload.chunks_exact(4) {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return Err(Error::Format("payload contains NaN or Inf".into()));
        }
        values.push(v as f64);
    }
    Ok((dims, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nan_payload() {
        let bytes = encode(FEATURE_MAGIC, &[1, 1, 2], [1.0, f64::NAN].into_iter());
        assert!(matches!(decode(&bytes, FEATURE_MAGIC, 3, 1), Err(Error::Format(_))));
    }

    #[test]
    fn header_layout_is_little_endian() {
        let bytes = encode(FLOW_MAGIC, &[2, 3], std::iter::repeat_n(0.0, 12));
        assert_eq!(&bytes[4..8], &[2, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[3, 0, 0, 0]);
    }

    #[test]
    fn rejects_trailing_bytes() {
        let mut bytes = encode(FLOW_MAGIC, &[1, 1], [0.0, 0.0].into_iter());
        bytes.push(0);
        assert!(decode(&bytes, FLOW_MAGIC, 2, 2).is_err());
    }
}
