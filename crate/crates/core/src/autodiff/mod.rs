//! Reverse-mode differentiation on a dynamic tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! creation order and only ever reference earlier nodes, so walking the tape
//! backwards is a valid topological order and the backward pass is
//! deterministic. Shapes are explicit; the only broadcasting is between a
//! single-element tensor and an array.

pub mod check;
pub mod kernels;
mod tensor;

pub use tensor::Tensor;

use crate::error::{shape_err, Error, Result};
use crate::geometry::{bilinear_taps, linear_taps, warp_channels};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Exp(Var),
    Abs(Var),
    Sum(Var),
    L2NormalizeRows(Var),
    SoftmaxRows(Var),
    Conv2d { input: Var, weight: Var, bias: Var },
    Resize { input: Var },
    Warp { values: Var, flow: Var },
    ForwardDiff { input: Var, axis: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass and its gradient accumulators.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Which operand of a binary op was broadcast from a single element.
enum Broadcast {
    None,
    Left,
    Right,
}

fn broadcast(a: &Tensor, b: &Tensor, op: &str) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::None)
    } else if a.is_scalar() {
        Ok(Broadcast::Left)
    } else if b.is_scalar() {
        Ok(Broadcast::Right)
    } else {
        Err(shape_err!("{op}: {:?} vs {:?}", a.shape(), b.shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, or zeros if nothing reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Passes the value through and cuts every gradient path into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mode = broadcast(va, vb, name)?;
        let value = match mode {
            Broadcast::None => {
                Tensor::new(va.shape(), va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect())?
            }
            Broadcast::Left => {
                let s = va.item();
                Tensor::new(vb.shape(), vb.data().iter().map(|&y| f(s, y)).collect())?
            }
            Broadcast::Right => {
                let s = vb.item();
                Tensor::new(va.shape(), va.data().iter().map(|&x| f(x, s)).collect())?
            }
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = &self.nodes[a.0].value;
        let value =
            Tensor::new(va.shape(), va.data().iter().map(|&x| f(x)).collect()).expect("unary op preserves shape");
        let rg = self.any_grad(&[a]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// `|x|`; the subgradient at 0 is taken as 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same shape")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != va.numel() {
            return Err(shape_err!("reshape {:?} -> {shape:?}", va.shape()));
        }
        let value = va.clone().reshaped(shape);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    fn rank2(&self, a: Var, op: &str) -> Result<(usize, usize)> {
        match *self.shape(a) {
            [r, c] => Ok((r, c)),
            ref s => Err(shape_err!("{op} expects a rank-2 tensor, got {s:?}")),
        }
    }

    fn rank3(&self, a: Var, op: &str) -> Result<(usize, usize, usize)> {
        match *self.shape(a) {
            [h, w, c] => Ok((h, w, c)),
            ref s => Err(shape_err!("{op} expects an h x w x c tensor, got {s:?}")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.rank2(a, "matmul")?;
        let (k2, m) = self.rank2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err!("matmul inner dims {k} vs {k2}"));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[n, m], data)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rank2(a, "transpose")?;
        let data = kernels::transpose(self.value(a).data(), r, c);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(&[c, r], data)?, Op::Transpose(a), rg))
    }

    /// Normalizes each row of a rank-2 tensor to unit L2 norm (zero rows stay zero).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rank2(a, "l2_normalize_rows")?;
        let (data, _) = kernels::l2_normalize_rows(self.value(a).data(), c);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(&[r, c], data)?, Op::L2NormalizeRows(a), rg))
    }

    /// Softmax over the columns of each row (one row per source cell).
    pub fn softmax_over_cells(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rank2(a, "softmax_over_cells")?;
        let data = kernels::softmax_rows(self.value(a).data(), c);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(&[r, c], data)?, Op::SoftmaxRows(a), rg))
    }

    /// Stride-1, same-padded convolution: input `h x w x ci`, weight
    /// `k x k x ci x co` (odd `k`), bias `co`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (h, w, ci) = self.rank3(input, "conv2d")?;
        let (k, co) = match *self.shape(weight) {
            [k, k2, c, co] if k == k2 && k % 2 == 1 && c == ci => (k, co),
            ref s => return Err(shape_err!("conv2d weight {s:?} does not fit input channels {ci}")),
        };
        if self.shape(bias) != [co] {
            return Err(shape_err!("conv2d bias {:?}, expected [{co}]", self.shape(bias)));
        }
        let data = kernels::conv2d_same(
            self.value(input).data(),
            h,
            w,
            ci,
            self.value(weight).data(),
            k,
            co,
            self.value(bias).data(),
        );
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(Tensor::new(&[h, w, co], data)?, Op::Conv2d { input, weight, bias }, rg))
    }

    /// Bilinear resize of an `h x w x c` map (cell-centre aligned, clamped).
    pub fn resize_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (h, w, c) = self.rank3(input, "resize_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Invalid("resize to an empty grid".into()));
        }
        let data = kernels::resize_bilinear(self.value(input).data(), h, w, c, out_h, out_w);
        let rg = self.any_grad(&[input]);
        Ok(self.push(Tensor::new(&[out_h, out_w, c], data)?, Op::Resize { input }, rg))
    }

    /// `out(p) = values(p + flow(p))` with bilinear sampling and zero padding;
    /// `values` is `h x w x k`, `flow` is `h x w x 2` holding `(dx, dy)`.
    pub fn warp(&mut self, values: Var, flow: Var) -> Result<Var> {
        let (h, w, k) = self.rank3(values, "warp")?;
        if self.shape(flow) != [h, w, 2] {
            return Err(shape_err!("warp flow {:?} does not match values {h}x{w}", self.shape(flow)));
        }
        let data = warp_channels(self.value(values).data(), h, w, k, self.value(flow).data());
        let rg = self.any_grad(&[values, flow]);
        Ok(self.push(Tensor::new(&[h, w, k], data)?, Op::Warp { values, flow }, rg))
    }

    /// Forward difference along `axis` (0 = rows/y, 1 = columns/x) of an
    /// `h x w x k` tensor; the trailing row/column is zero.
    pub fn forward_diff(&mut self, input: Var, axis: usize) -> Result<Var> {
        let (h, w, k) = self.rank3(input, "forward_diff")?;
        if axis > 1 {
            return Err(Error::Invalid(format!("forward_diff axis {axis}")));
        }
        let src = self.value(input).data();
        let mut data = vec![0.0; h * w * k];
        let step = if axis == 0 { w * k } else { k };
        for y in 0..h {
            for x in 0..w {
                if (axis == 0 && y + 1 == h) || (axis == 1 && x + 1 == w) {
                    continue;
                }
                let i = (y * w + x) * k;
                for c in 0..k {
                    data[i + c] = src[i + step + c] - src[i + c];
                }
            }
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(Tensor::new(&[h, w, k], data)?, Op::ForwardDiff { input, axis }, rg))
    }

    /// Accumulates `d(root)/d(node)` into every node that requires grad.
    /// Calling it twice without [`Graph::zero_grad`] adds the gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(shape_err!("backward needs a scalar root, got {:?}", self.nodes[root.0].value.shape()));
        }
        let mut local: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        local[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut local);
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(g.data()),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, local: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut send = |v: Var, grad: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut local[v.0] {
                Some(acc) => acc.add_assign(&grad),
                slot => {
                    *slot =
                        Some(Tensor::new(self.nodes[v.0].value.shape(), grad).expect("gradient matches value shape"))
                }
            }
        };
        let gd = g.data();
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                send(a, reduce_like(gd, self.value(a)));
                send(b, reduce_like(&gd.iter().map(|v| sign * v).collect::<Vec<_>>(), self.value(b)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let ga: Vec<f64> = gd.iter().enumerate().map(|(j, d)| d * elem(vb, j)).collect();
                let gb: Vec<f64> = gd.iter().enumerate().map(|(j, d)| d * elem(va, j)).collect();
                send(a, reduce_like(&ga, va));
                send(b, reduce_like(&gb, vb));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let ga: Vec<f64> = gd.iter().enumerate().map(|(j, d)| d / elem(vb, j)).collect();
                let gb: Vec<f64> =
                    gd.iter().enumerate().map(|(j, d)| -d * elem(va, j) / (elem(vb, j) * elem(vb, j))).collect();
                send(a, reduce_like(&ga, va));
                send(b, reduce_like(&gb, vb));
            }
            Op::Scale(a, c) => send(a, gd.iter().map(|d| c * d).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => send(a, gd.to_vec()),
            Op::Relu(a) => {
                let va = self.value(a).data();
                send(a, gd.iter().zip(va).map(|(d, &x)| if x > 0.0 { *d } else { 0.0 }).collect());
            }
            Op::Exp(a) => send(a, gd.iter().zip(out.data()).map(|(d, y)| d * y).collect()),
            Op::Abs(a) => {
                let va = self.value(a).data();
                send(
                    a,
                    gd.iter()
                        .zip(va)
                        .map(|(d, &x)| {
                            if x > 0.0 {
                                *d
                            } else if x < 0.0 {
                                -d
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                );
            }
            Op::Sum(a) => send(a, vec![gd[0]; self.value(a).numel()]),
            Op::MatMul(a, b) => {
                let (n, k) = (self.shape(a)[0], self.shape(a)[1]);
                let m = self.shape(b)[1];
                let bt = kernels::transpose(self.value(b).data(), k, m);
                send(a, kernels::matmul(gd, &bt, n, m, k));
                let at = kernels::transpose(self.value(a).data(), n, k);
                send(b, kernels::matmul(&at, gd, k, n, m));
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
                send(a, kernels::transpose(gd, c, r));
            }
            Op::L2NormalizeRows(a) => {
                let c = self.shape(a)[1];
                let mut ga = vec![0.0; gd.len()];
                for ((row_g, row_y), (row_x, dst)) in gd
                    .chunks_exact(c)
                    .zip(out.data().chunks_exact(c))
                    .zip(self.value(a).data().chunks_exact(c).zip(ga.chunks_exact_mut(c)))
                {
                    let norm = row_x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let dot: f64 = row_g.iter().zip(row_y).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dst[j] = (row_g[j] - row_y[j] * dot) / norm;
                    }
                }
                send(a, ga);
            }
            Op::SoftmaxRows(a) => {
                let c = self.shape(a)[1];
                let mut ga = vec![0.0; gd.len()];
                for ((row_g, row_y), dst) in
                    gd.chunks_exact(c).zip(out.data().chunks_exact(c)).zip(ga.chunks_exact_mut(c))
                {
                    let dot: f64 = row_g.iter().zip(row_y).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dst[j] = row_y[j] * (row_g[j] - dot);
                    }
                }
                send(a, ga);
            }
            Op::Conv2d { input, weight, bias } => {
                let (h, w, ci) = (self.shape(input)[0], self.shape(input)[1], self.shape(input)[2]);
                let (k, co) = (self.shape(weight)[0], self.shape(weight)[3]);
                let (gi, gw, gb) =
                    conv2d_backward(self.value(input).data(), h, w, ci, self.value(weight).data(), k, co, gd);
                send(input, gi);
                send(weight, gw);
                send(bias, gb);
            }
            Op::Resize { input } => {
                let (h, w, c) = (self.shape(input)[0], self.shape(input)[1], self.shape(input)[2]);
                let (oh, ow) = (out.shape()[0], out.shape()[1]);
                let mut gi = vec![0.0; h * w * c];
                let yt = linear_taps(h, oh);
                let xt = linear_taps(w, ow);
                for (oy, &(y0, y1, fy)) in yt.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xt.iter().enumerate() {
                        let src = &gd[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                        for (sy, sx, wt) in [
                            (y0, x0, (1.0 - fy) * (1.0 - fx)),
                            (y0, x1, (1.0 - fy) * fx),
                            (y1, x0, fy * (1.0 - fx)),
                            (y1, x1, fy * fx),
                        ] {
                            let dst = &mut gi[(sy * w + sx) * c..(sy * w + sx + 1) * c];
                            for (o, v) in dst.iter_mut().zip(src) {
                                *o += wt * v;
                            }
                        }
                    }
                }
                send(input, gi);
            }
            Op::Warp { values, flow } => {
                let (h, w, k) = (self.shape(values)[0], self.shape(values)[1], self.shape(values)[2]);
                let vals = self.value(values).data();
                let fl = self.value(flow).data();
                let mut gv = vec![0.0; vals.len()];
                let mut gf = vec![0.0; fl.len()];
                for y in 0..h {
                    for x in 0..w {
                        let p = y * w + x;
                        let taps = bilinear_taps(h, w, x as f64 + fl[2 * p], y as f64 + fl[2 * p + 1]);
                        let go = &gd[p * k..(p + 1) * k];
                        for t in taps.iter() {
                            let src = &vals[t.index * k..(t.index + 1) * k];
                            let dst = &mut gv[t.index * k..(t.index + 1) * k];
                            let mut dot = 0.0;
                            for c in 0..k {
                                dst[c] += t.weight * go[c];
                                dot += go[c] * src[c];
                            }
                            gf[2 * p] += dot * t.d_dx;
                            gf[2 * p + 1] += dot * t.d_dy;
                        }
                    }
                }
                send(values, gv);
                send(flow, gf);
            }
            Op::ForwardDiff { input, axis } => {
                let (h, w, k) = (self.shape(input)[0], self.shape(input)[1], self.shape(input)[2]);
                let step = if axis == 0 { w * k } else { k };
                let mut gi = vec![0.0; gd.len()];
                for y in 0..h {
                    for x in 0..w {
                        if (axis == 0 && y + 1 == h) || (axis == 1 && x + 1 == w) {
                            continue;
                        }
                        let i = (y * w + x) * k;
                        for c in 0..k {
                            gi[i + step + c] += gd[i + c];
                            gi[i + c] -= gd[i + c];
                        }
                    }
                }
                send(input, gi);
            }
        }
    }
}

fn elem(t: &Tensor, j: usize) -> f64 {
    if t.numel() == 1 {
        t.data()[0]
    } else {
        t.data()[j]
    }
}

/// Sums a gradient down to a broadcast single-element operand.
fn reduce_like(g: &[f64], operand: &Tensor) -> Vec<f64> {
    if operand.numel() == g.len() {
        g.to_vec()
    } else {
        vec![g.iter().sum()]
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    input: &[f64],
    h: usize,
    w: usize,
    ci: usize,
    weight: &[f64],
    k: usize,
    co: usize,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let r = (k / 2) as isize;
    let mut gi = vec![0.0; input.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; co];
    for y in 0..h {
        for x in 0..w {
            let go = &g[(y * w + x) * co..(y * w + x + 1) * co];
            for (b, v) in gb.iter_mut().zip(go) {
                *b += v;
            }
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
                    let base = (yy as usize * w + xx as usize) * ci;
                    let slab = (ky * k + kx) * ci * co;
                    for c in 0..ci {
                        let xin = input[base + c];
                        let wrow = &weight[slab + c * co..slab + (c + 1) * co];
                        let gwrow = &mut gw[slab + c * co..slab + (c + 1) * co];
                        let mut acc = 0.0;
                        for o in 0..co {
                            acc += go[o] * wrow[o];
                            gwrow[o] += xin * go[o];
                        }
                        gi[base + c] += acc;
                    }
                }
            }
        }
    }
    (gi, gw, gb)
}
