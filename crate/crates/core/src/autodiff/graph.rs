//! Tape of recorded ops with a reverse-mode backward pass.
//!
//! Nodes are appended in evaluation order, so index order is a topological
//! order and the backward sweep walks indices downwards, visiting each node
//! once.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Batch-norm running statistics, updated in place by training-mode calls.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    RegionAvgPool {
        input: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        input: Var,
    },
    Softmax {
        input: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    WeightedSum {
        input: Var,
        coeffs: Vec<T>,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Vec<T>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recorded computation over [`Tensor`]s.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Geometry shared by the convolution forward and backward kernels.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] = dx[base + ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], var: Var, len: usize, f: impl FnOnce(&mut [T])) {
    let slot = grads[var.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

/// (outer, channels, inner) view used by batch norm: rank 2 is N×D, rank 4
/// is N×C×(H·W).
fn bn_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [n, d] => Some((n, d, 1)),
        [n, c, h, w] => Some((n, c, h * w)),
        _ => None,
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        value = value.with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Constant input; no gradient is accumulated for it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.take_grad()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("conv2d", &ws, &bs));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let g = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let (rows, p) = (g.rows(), g.cols());
        let mut out = vec![T::zero(); n * o * p];
        let mut col = vec![T::zero(); rows * p];
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let b = self.value(bias).data();
            for s in 0..n {
                im2col(&x[s * c * h * w..(s + 1) * c * h * w], &g, &mut col);
                let dst = &mut out[s * o * p..(s + 1) * o * p];
                for (oc, row) in dst.chunks_mut(p).enumerate() {
                    row.fill(b[oc]);
                }
                T::gemm(o, rows, p, T::one(), wt, (rows as isize, 1), &col, (p as isize, 1), T::one(), dst, (p as isize, 1));
            }
        }
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        let value = Tensor::new(vec![n, o, g.oh, g.ow], out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, bias, stride, padding }, rg))
    }

    /// Per-sample, per-channel mean over `rows × cols` of an N×C×H×W input.
    pub fn region_avg_pool(&mut self, input: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::invalid("region_avg_pool", format!("expected NCHW input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if rows.is_empty() || cols.is_empty() || rows.end > h || cols.end > w {
            return Err(Error::range(
                "region_avg_pool",
                format!("rows {rows:?} cols {cols:?} outside {h}x{w}"),
            ));
        }
        let area = T::of(rows.len() as f64 * cols.len() as f64);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c);
        for plane in x.chunks(h * w) {
            let mut acc = T::zero();
            for r in rows.clone() {
                for v in &plane[r * w + cols.start..r * w + cols.end] {
                    acc = acc + *v;
                }
            }
            out.push(acc / area);
        }
        let rg = self.needs(input);
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::RegionAvgPool { input, rows, cols }, rg))
    }

    /// Global average pooling; the full-extent special case of
    /// [`Graph::region_avg_pool`].
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::invalid("global_avg_pool", format!("expected NCHW input, got {xs:?}")));
        }
        self.region_avg_pool(input, 0..xs[2], 0..xs[3])
    }

    /// `input · weight + bias` for N×D input and D×E weight.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape("linear", &xs, &ws));
        }
        if bs != [ws[1]] {
            return Err(Error::shape("linear", &ws, &bs));
        }
        let (n, d, e) = (xs[0], xs[1], ws[1]);
        let b = self.value(bias).data();
        let mut out: Vec<T> = (0..n).flat_map(|_| b.iter().copied()).collect();
        T::gemm(
            n,
            d,
            e,
            T::one(),
            self.value(input).data(),
            (d as isize, 1),
            self.value(weight).data(),
            (e as isize, 1),
            T::one(),
            &mut out,
            (e as isize, 1),
        );
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        let value = Tensor::new(vec![n, e], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    /// Batch normalization over N×D (per feature) or N×C×H×W (per channel).
    ///
    /// Train mode normalizes with biased batch statistics and folds the
    /// unbiased variance into `stats`; eval mode normalizes with `stats`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats<T>,
        mode: Mode,
        cfg: BnConfig,
    ) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let (outer, ch, inner) =
            bn_layout(&xs).ok_or_else(|| Error::invalid("batch_norm", format!("unsupported input shape {xs:?}")))?;
        for v in [gamma, beta] {
            if self.value(v).shape() != [ch] {
                return Err(Error::shape("batch_norm", &xs, self.value(v).shape()));
            }
        }
        if stats.mean.len() != ch || stats.var.len() != ch {
            return Err(Error::shape("batch_norm", &xs, &[stats.mean.len()]));
        }
        if mode == Mode::Train && outer < 2 {
            return Err(Error::invalid("batch_norm", "training mode needs a batch of at least 2"));
        }
        let x = self.value(input).data();
        let count = outer * inner;
        let eps = T::of(cfg.eps);
        let (mean, var) = match mode {
            Mode::Train => {
                let cnt = T::of(count as f64);
                let mut mean = vec![T::zero(); ch];
                let mut var = vec![T::zero(); ch];
                for c in 0..ch {
                    let mut acc = T::zero();
                    for s in 0..outer {
                        for v in &x[(s * ch + c) * inner..(s * ch + c + 1) * inner] {
                            acc = acc + *v;
                        }
                    }
                    let m = acc / cnt;
                    let mut sq = T::zero();
                    for s in 0..outer {
                        for v in &x[(s * ch + c) * inner..(s * ch + c + 1) * inner] {
                            sq = sq + (*v - m) * (*v - m);
                        }
                    }
                    mean[c] = m;
                    var[c] = sq / cnt;
                }
                let mom = T::of(cfg.momentum);
                let unbias = T::of(count as f64 / (count as f64 - 1.0));
                for c in 0..ch {
                    stats.mean[c] = (T::one() - mom) * stats.mean[c] + mom * mean[c];
                    stats.var[c] = (T::one() - mom) * stats.var[c] + mom * var[c] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for s in 0..outer {
            for c in 0..ch {
                let base = (s * ch + c) * inner;
                for i in base..base + inner {
                    xhat[i] = (x[i] - mean[c]) * inv_std[c];
                    out[i] = xhat[i] * gm[c] + bt[c];
                }
            }
        }
        let rg = self.needs(input) || self.needs(gamma) || self.needs(beta);
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.max(T::zero())).collect())
            .expect("same shape");
        let rg = self.needs(input);
        self.push(out, Op::Relu { input }, rg)
    }

    /// Row-wise softmax of an N×K input.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        if t.rank() != 2 {
            return Err(Error::invalid("softmax", format!("expected N×K input, got {:?}", t.shape())));
        }
        let k = t.shape()[1];
        let out = softmax_rows(t.data(), k);
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::Softmax { input }, rg))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)` so eval mode is
    /// the identity.
    pub fn dropout(&mut self, input: Var, rate: f64, mode: Mode, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::range("dropout", format!("rate {rate} outside [0, 1)")));
        }
        let t = self.value(input);
        let mask: Vec<T> = match mode {
            Mode::Eval => vec![T::one(); t.numel()],
            Mode::Train => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let keep = T::of(1.0 / (1.0 - rate));
                (0..t.numel())
                    .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
                    .collect()
            }
        };
        let out = t.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.needs(input);
        Ok(self.push(value, Op::Dropout { input, mask }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| *x + *y).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let t = self.value(input);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| *v * factor).collect())
            .expect("same shape");
        let rg = self.needs(input);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    /// Scalar `Σ coeffs[i] · input[i]`.
    pub fn weighted_sum(&mut self, input: Var, coeffs: Vec<T>) -> Result<Var> {
        let t = self.value(input);
        if coeffs.len() != t.numel() {
            return Err(Error::shape("weighted_sum", t.shape(), &[coeffs.len()]));
        }
        let s = t.data().iter().zip(&coeffs).map(|(x, c)| *x * *c).sum();
        let rg = self.needs(input);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { input, coeffs }, rg))
    }

    /// Batch mean of `−Σ_k q_k log softmax(z)_k`, with `targets` the N×K
    /// row-major target distributions.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Vec<T>) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || targets.len() != t.numel() {
            return Err(Error::shape("soft_cross_entropy", t.shape(), &[targets.len()]));
        }
        let (n, k) = (t.shape()[0], t.shape()[1]);
        let z = t.data();
        let mut probs = vec![T::zero(); z.len()];
        let mut total = T::zero();
        for r in 0..n {
            let row = &z[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|v| (*v - max).exp()).sum::<T>().ln();
            for j in 0..k {
                let logp = row[j] - lse;
                probs[r * k + j] = logp.exp();
                total = total - targets[r * k + j] * logp;
            }
        }
        let loss = total / T::of(n as f64);
        let rg = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::SoftCrossEntropy { logits, targets, probs }, rg))
    }

    /// Reverse sweep from a scalar node; leaves that require a gradient end
    /// up with one stored in their tensor's gradient slot.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("output must be scalar, got shape {:?}", self.value(root).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad() {
                continue;
            }
            self.backward_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                if node.value.requires_grad() {
                    node.value.set_grad(g);
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (xs, ws) = (x.shape(), wt.shape());
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                let ys = node.value.shape();
                let g = ConvGeom {
                    c,
                    h,
                    w,
                    kh,
                    kw,
                    stride: *stride,
                    pad: *padding,
                    oh: ys[2],
                    ow: ys[3],
                };
                let (rows, p) = (g.rows(), g.cols());
                if self.needs(*bias) {
                    accumulate(grads, *bias, o, |db| {
                        for s in 0..n {
                            for oc in 0..o {
                                let base = (s * o + oc) * p;
                                db[oc] = db[oc] + gy[base..base + p].iter().copied().sum::<T>();
                            }
                        }
                    });
                }
                let want_w = self.needs(*weight);
                let want_x = self.needs(*input);
                let mut col = vec![T::zero(); rows * p];
                let mut dw = if want_w { vec![T::zero(); wt.numel()] } else { Vec::new() };
                let mut dx = if want_x { vec![T::zero(); x.numel()] } else { Vec::new() };
                for s in 0..n {
                    let gys = &gy[s * o * p..(s + 1) * o * p];
                    if want_w {
                        im2col(&x.data()[s * c * h * w..(s + 1) * c * h * w], &g, &mut col);
                        T::gemm(o, p, rows, T::one(), gys, (p as isize, 1), &col, (1, p as isize), T::one(), &mut dw, (rows as isize, 1));
                    }
                    if want_x {
                        T::gemm(rows, o, p, T::one(), wt.data(), (1, rows as isize), gys, (p as isize, 1), T::zero(), &mut col, (p as isize, 1));
                        col2im(&col, &g, &mut dx[s * c * h * w..(s + 1) * c * h * w]);
                    }
                }
                if want_w {
                    accumulate(grads, *weight, dw.len(), |acc| add_into(acc, &dw));
                }
                if want_x {
                    accumulate(grads, *input, dx.len(), |acc| add_into(acc, &dx));
                }
            }
            Op::RegionAvgPool { input, rows, cols } => {
                if !self.needs(*input) {
                    return;
                }
                let x = self.value(*input);
                let (h, w) = (x.shape()[2], x.shape()[3]);
                let area = T::of(rows.len() as f64 * cols.len() as f64);
                accumulate(grads, *input, x.numel(), |dx| {
                    for (plane, g) in dx.chunks_mut(h * w).zip(gy) {
                        let share = *g / area;
                        for r in rows.clone() {
                            for v in &mut plane[r * w + cols.start..r * w + cols.end] {
                                *v = *v + share;
                            }
                        }
                    }
                });
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, d, e) = (x.shape()[0], x.shape()[1], wt.shape()[1]);
                if self.needs(*bias) {
                    accumulate(grads, *bias, e, |db| {
                        for row in gy.chunks(e) {
                            add_into(db, row);
                        }
                    });
                }
                if self.needs(*weight) {
                    accumulate(grads, *weight, d * e, |dw| {
                        T::gemm(d, n, e, T::one(), x.data(), (1, d as isize), gy, (e as isize, 1), T::one(), dw, (e as isize, 1));
                    });
                }
                if self.needs(*input) {
                    accumulate(grads, *input, n * d, |dx| {
                        T::gemm(n, e, d, T::one(), gy, (e as isize, 1), wt.data(), (1, e as isize), T::one(), dx, (d as isize, 1));
                    });
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (outer, ch, inner) = bn_layout(node.value.shape()).expect("validated in forward");
                let gm = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); ch];
                let mut sum_gx = vec![T::zero(); ch];
                for s in 0..outer {
                    for c in 0..ch {
                        let base = (s * ch + c) * inner;
                        for i in base..base + inner {
                            sum_g[c] = sum_g[c] + gy[i];
                            sum_gx[c] = sum_gx[c] + gy[i] * xhat[i];
                        }
                    }
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, ch, |acc| add_into(acc, &sum_gx));
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, ch, |acc| add_into(acc, &sum_g));
                }
                if self.needs(*input) {
                    let m = T::of((outer * inner) as f64);
                    accumulate(grads, *input, gy.len(), |dx| {
                        for s in 0..outer {
                            for c in 0..ch {
                                let base = (s * ch + c) * inner;
                                let k = gm[c] * inv_std[c];
                                for i in base..base + inner {
                                    let d = if *batch_stats {
                                        k * (gy[i] - sum_g[c] / m - xhat[i] * sum_gx[c] / m)
                                    } else {
                                        k * gy[i]
                                    };
                                    dx[i] = dx[i] + d;
                                }
                            }
                        }
                    });
                }
            }
            Op::Relu { input } => {
                let y = node.value.data();
                accumulate(grads, *input, y.len(), |dx| {
                    for ((d, g), v) in dx.iter_mut().zip(gy).zip(y) {
                        if *v > T::zero() {
                            *d = *d + *g;
                        }
                    }
                });
            }
            Op::Softmax { input } => {
                let y = node.value.data();
                let k = node.value.shape()[1];
                accumulate(grads, *input, y.len(), |dx| {
                    for ((drow, grow), yrow) in dx.chunks_mut(k).zip(gy.chunks(k)).zip(y.chunks(k)) {
                        let dot: T = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                        for j in 0..k {
                            drow[j] = drow[j] + yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::Dropout { input, mask } => {
                accumulate(grads, *input, mask.len(), |dx| {
                    for ((d, g), m) in dx.iter_mut().zip(gy).zip(mask) {
                        *d = *d + *g * *m;
                    }
                });
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        accumulate(grads, v, gy.len(), |acc| add_into(acc, gy));
                    }
                }
            }
            Op::Scale { input, factor } => {
                accumulate(grads, *input, gy.len(), |dx| {
                    for (d, g) in dx.iter_mut().zip(gy) {
                        *d = *d + *g * *factor;
                    }
                });
            }
            Op::WeightedSum { input, coeffs } => {
                accumulate(grads, *input, coeffs.len(), |dx| {
                    for (d, c) in dx.iter_mut().zip(coeffs) {
                        *d = *d + gy[0] * *c;
                    }
                });
            }
            Op::SoftCrossEntropy { logits, targets, probs } => {
                let shape = self.value(*logits).shape();
                let (n, k) = (shape[0], shape[1]);
                let scale = gy[0] / T::of(n as f64);
                accumulate(grads, *logits, probs.len(), |dz| {
                    for r in 0..n {
                        let qs = &targets[r * k..(r + 1) * k];
                        let mass: T = qs.iter().copied().sum();
                        for j in 0..k {
                            let i = r * k + j;
                            dz[i] = dz[i] + scale * (probs[i] * mass - qs[j]);
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(acc: &mut [T], src: &[T]) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a = *a + *s;
    }
}

/// Numerically stable row-wise softmax over rows of length `k`.
pub fn softmax_rows<T: Real>(data: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|v| (*v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}
