//! Forward kernels shared by the tape and the plain (non-differentiable)
//! code paths.

use crate::geometry::linear_taps;

/// Same-padded, stride-1 convolution on an `h x w x ci` map (channels
/// fastest) with a `k x k x ci x co` kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_same(
    input: &[f64],
    h: usize,
    w: usize,
    ci: usize,
    weight: &[f64],
    k: usize,
    co: usize,
    bias: &[f64],
) -> Vec<f64> {
    let r = (k / 2) as isize;
    let mut out = vec![0.0; h * w * co];
    for y in 0..h {
        for x in 0..w {
            let dst = &mut out[(y * w + x) * co..(y * w + x + 1) * co];
            dst.copy_from_slice(bias);
            for ky in 0..k {
                let yy = y as isize + ky as isize - r;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let xx = x as isize + kx as isize - r;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let src = &input[(yy as usize * w + xx as usize) * ci..][..ci];
                    let slab = &weight[(ky * k + kx) * ci * co..][..ci * co];
                    for (c, &v) in src.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        for (o, &wt) in dst.iter_mut().zip(&slab[c * co..(c + 1) * co]) {
                            *o += v * wt;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Bilinear resize of an `h x w x c` map to `oh x ow x c` with cell-centre
/// alignment and clamped borders.
pub fn resize_bilinear(input: &[f64], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f64> {
    let yt = linear_taps(h, oh);
    let xt = linear_taps(w, ow);
    let mut out = vec![0.0; oh * ow * c];
    for (oy, &(y0, y1, fy)) in yt.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xt.iter().enumerate() {
            let dst = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for (sy, sx, wt) in [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ] {
                if wt == 0.0 {
                    continue;
                }
                let src = &input[(sy * w + sx) * c..(sy * w + sx + 1) * c];
                for (o, v) in dst.iter_mut().zip(src) {
                    *o += wt * v;
                }
            }
        }
    }
    out
}

/// Divides each length-`cols` row by its L2 norm; zero rows stay zero.
/// Returns the normalized rows and the norms.
pub fn l2_normalize_rows(data: &[f64], cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = data.to_vec();
    let mut norms = Vec::with_capacity(data.len() / cols.max(1));
    for row in out.chunks_exact_mut(cols) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
        norms.push(n);
    }
    (out, norms)
}

/// Numerically stable softmax of each length-`cols` row.
pub fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for row in out.chunks_exact_mut(cols) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// `[n, k] x [k, m]`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for (j, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[j * m..(j + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
