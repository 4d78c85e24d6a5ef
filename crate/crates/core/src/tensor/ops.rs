//! Forward ops and their backward rules.

use std::collections::HashMap;

use crate::label::{LabelMap, IGNORE_LABEL};
use crate::scalar::Scalar;

use super::{grad_enabled, nearest_index_map, Result, Tensor, TensorError};

/// Probabilities are clamped here before `ln` so a fully saturated softmax
/// cannot produce an infinite loss or gradient.
const PROB_FLOOR: f64 = 1e-12;

pub enum Op<S: Scalar> {
    Leaf,
    Add(Tensor<S>, Tensor<S>),
    AddScalar(Tensor<S>),
    Mul(Tensor<S>, Tensor<S>),
    MulScalar(Tensor<S>, S),
    Relu(Tensor<S>),
    Sigmoid(Tensor<S>),
    Sum(Tensor<S>),
    Mean(Tensor<S>),
    Conv2d {
        input: Tensor<S>,
        kernel: Tensor<S>,
        bias: Option<Tensor<S>>,
        stride: usize,
        pad: usize,
    },
    SoftmaxChannels(Tensor<S>),
    CrossEntropy {
        probs: Tensor<S>,
        target: LabelMap,
        valid: usize,
    },
    Mse(Tensor<S>, Tensor<S>),
    NearestResize(Tensor<S>),
    ChannelDropout {
        input: Tensor<S>,
        keep: Vec<bool>,
        scale: S,
    },
    /// Weighted sum of temperature-scaled cosine losses against a constant
    /// prototype, over a list of spatial positions.
    CosineAggSum {
        input: Tensor<S>,
        positions: Vec<usize>,
        weights: Vec<S>,
        proto: Vec<S>,
        tau: S,
    },
}

impl<S: Scalar> Op<S> {
    pub(crate) fn parents(&self) -> Vec<&Tensor<S>> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => vec![a, b],
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SoftmaxChannels(a)
            | Op::NearestResize(a) => vec![a],
            Op::Conv2d { input, kernel, bias, .. } => {
                let mut v = vec![input, kernel];
                if let Some(b) = bias {
                    v.push(b);
                }
                v
            }
            Op::CrossEntropy { probs, .. } => vec![probs],
            Op::ChannelDropout { input, .. } => vec![input],
            Op::CosineAggSum { input, .. } => vec![input],
        }
    }

    pub(crate) fn backward(&self, node: &Tensor<S>, g: &[S], sink: &mut HashMap<u64, Vec<S>>) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                push(sink, a, |acc| axpy(acc, g, S::one()));
                push(sink, b, |acc| axpy(acc, g, S::one()));
            }
            Op::AddScalar(a) => push(sink, a, |acc| axpy(acc, g, S::one())),
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    let bd = b.data();
                    push(sink, a, |acc| {
                        for ((acc, &g), &b) in acc.iter_mut().zip(g).zip(bd.iter()) {
                            *acc += g * b;
                        }
                    });
                }
                if b.requires_grad() {
                    let ad = a.data();
                    push(sink, b, |acc| {
                        for ((acc, &g), &a) in acc.iter_mut().zip(g).zip(ad.iter()) {
                            *acc += g * a;
                        }
                    });
                }
            }
            Op::MulScalar(a, s) => push(sink, a, |acc| axpy(acc, g, *s)),
            Op::Relu(a) => {
                let ad = a.data();
                push(sink, a, |acc| {
                    for ((acc, &g), &x) in acc.iter_mut().zip(g).zip(ad.iter()) {
                        if x > S::zero() {
                            *acc += g;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let sd = node.data();
                push(sink, a, |acc| {
                    for ((acc, &g), &s) in acc.iter_mut().zip(g).zip(sd.iter()) {
                        *acc += g * s * (S::one() - s);
                    }
                });
            }
            Op::Sum(a) => push(sink, a, |acc| {
                for v in acc.iter_mut() {
                    *v += g[0];
                }
            }),
            Op::Mean(a) => {
                let inv = S::one() / S::from_f64_lossy(a.numel() as f64);
                push(sink, a, |acc| {
                    for v in acc.iter_mut() {
                        *v += g[0] * inv;
                    }
                });
            }
            Op::Conv2d { input, kernel, bias, stride, pad } => {
                conv2d_backward(node, g, input, kernel, bias.as_ref(), *stride, *pad, sink);
            }
            Op::SoftmaxChannels(a) => {
                let p = node.data();
                let c = *node.shape().last().unwrap();
                push(sink, a, |acc| {
                    for (row, (grow, arow)) in
                        p.chunks_exact(c).zip(g.chunks_exact(c).zip(acc.chunks_exact_mut(c)))
                    {
                        let dot: S = grow.iter().zip(row).map(|(&g, &p)| g * p).sum();
                        for ((a, &p), &g) in arow.iter_mut().zip(row).zip(grow) {
                            *a += p * (g - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { probs, target, valid } => {
                if *valid == 0 {
                    return;
                }
                let (_, _, c) = probs.dims3().expect("ce probs are 3-d");
                let floor = S::from_f64_lossy(PROB_FLOOR);
                let inv_n = S::one() / S::from_f64_lossy(*valid as f64);
                let pd = probs.data();
                push(sink, probs, |acc| {
                    for (pos, &t) in target.data.iter().enumerate() {
                        if t == IGNORE_LABEL {
                            continue;
                        }
                        let idx = pos * c + t as usize;
                        let p = pd[idx].max(floor);
                        acc[idx] -= g[0] * inv_n / p;
                    }
                });
            }
            Op::Mse(a, b) => {
                let k_inv = S::from_f64_lossy(2.0 / a.numel() as f64);
                let (ad, bd) = (a.data(), b.data());
                if a.requires_grad() {
                    push(sink, a, |acc| {
                        for (acc, (&x, &y)) in acc.iter_mut().zip(ad.iter().zip(bd.iter())) {
                            *acc += g[0] * k_inv * (x - y);
                        }
                    });
                }
                if b.requires_grad() {
                    push(sink, b, |acc| {
                        for (acc, (&x, &y)) in acc.iter_mut().zip(ad.iter().zip(bd.iter())) {
                            *acc -= g[0] * k_inv * (x - y);
                        }
                    });
                }
            }
            Op::NearestResize(a) => {
                let (sh, sw, d) = a.dims3().expect("resize input is 3-d");
                let (nh, nw, _) = node.dims3().expect("resize output is 3-d");
                let rows = nearest_index_map(sh, nh);
                let cols = nearest_index_map(sw, nw);
                push(sink, a, |acc| {
                    for (oy, &sy) in rows.iter().enumerate() {
                        for (ox, &sx) in cols.iter().enumerate() {
                            let src = (sy * sw + sx) * d;
                            let dst = (oy * nw + ox) * d;
                            for j in 0..d {
                                acc[src + j] += g[dst + j];
                            }
                        }
                    }
                });
            }
            Op::ChannelDropout { input, keep, scale } => {
                let d = keep.len();
                push(sink, input, |acc| {
                    for (arow, grow) in acc.chunks_exact_mut(d).zip(g.chunks_exact(d)) {
                        for ((a, &g), &k) in arow.iter_mut().zip(grow).zip(keep.iter()) {
                            if k {
                                *a += g * *scale;
                            }
                        }
                    }
                });
            }
            Op::CosineAggSum { input, positions, weights, proto, tau } => {
                let (_, _, d) = input.dims3().expect("agg input is 3-d");
                let vnorm = norm(proto);
                let xd = input.data();
                push(sink, input, |acc| {
                    for (&pos, &w) in positions.iter().zip(weights.iter()) {
                        let z = &xd[pos * d..(pos + 1) * d];
                        let zn = norm(z);
                        let dot: S = z.iter().zip(proto).map(|(&a, &b)| a * b).sum();
                        let cos = dot / (zn * vnorm);
                        let coef = g[0] * w / *tau;
                        let gz = &mut acc[pos * d..(pos + 1) * d];
                        for ((gz, &zi), &vi) in gz.iter_mut().zip(z).zip(proto) {
                            *gz += coef * (cos * zi / (zn * zn) - vi / (zn * vnorm));
                        }
                    }
                });
            }
        }
    }
}

fn push<S: Scalar, F: FnOnce(&mut Vec<S>)>(sink: &mut HashMap<u64, Vec<S>>, t: &Tensor<S>, f: F) {
    if !t.requires_grad() {
        return;
    }
    let acc = sink.entry(t.id()).or_insert_with(|| vec![S::zero(); t.numel()]);
    f(acc);
}

fn axpy<S: Scalar>(acc: &mut [S], g: &[S], s: S) {
    for (a, &g) in acc.iter_mut().zip(g) {
        *a += g * s;
    }
}

fn norm<S: Scalar>(v: &[S]) -> S {
    v.iter().map(|&x| x * x).sum::<S>().sqrt()
}

fn same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<S: Scalar> Tensor<S> {
    fn unary(&self, data: Vec<S>, op: impl FnOnce(Tensor<S>) -> Op<S>) -> Tensor<S> {
        let track = grad_enabled() && self.requires_grad();
        Tensor::make(
            self.shape().to_vec(),
            data,
            track,
            if track { op(self.clone()) } else { Op::Leaf },
        )
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape(self, other, "add")?;
        let data = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a + b).collect();
        let track = grad_enabled() && (self.requires_grad() || other.requires_grad());
        Ok(Tensor::make(
            self.shape().to_vec(),
            data,
            track,
            if track { Op::Add(self.clone(), other.clone()) } else { Op::Leaf },
        ))
    }

    pub fn add_scalar(&self, s: S) -> Tensor<S> {
        let data = self.data().iter().map(|&a| a + s).collect();
        self.unary(data, Op::AddScalar)
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape(self, other, "mul")?;
        let data = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a * b).collect();
        let track = grad_enabled() && (self.requires_grad() || other.requires_grad());
        Ok(Tensor::make(
            self.shape().to_vec(),
            data,
            track,
            if track { Op::Mul(self.clone(), other.clone()) } else { Op::Leaf },
        ))
    }

    pub fn scalar_mul(&self, s: S) -> Tensor<S> {
        let data = self.data().iter().map(|&a| a * s).collect();
        self.unary(data, |t| Op::MulScalar(t, s))
    }

    pub fn relu(&self) -> Tensor<S> {
        let data = self.data().iter().map(|&a| a.max(S::zero())).collect();
        self.unary(data, Op::Relu)
    }

    /// Logistic squash 1 / (1 + e^-x), elementwise.
    pub fn sigmoid(&self) -> Tensor<S> {
        let data = self.data().iter().map(|&a| S::one() / (S::one() + (-a).exp())).collect();
        self.unary(data, Op::Sigmoid)
    }

    pub fn sum(&self) -> Tensor<S> {
        let s: S = self.data().iter().copied().sum();
        let track = grad_enabled() && self.requires_grad();
        Tensor::make(vec![], vec![s], track, if track { Op::Sum(self.clone()) } else { Op::Leaf })
    }

    pub fn mean(&self) -> Tensor<S> {
        let s: S = self.data().iter().copied().sum();
        let m = s / S::from_f64_lossy(self.numel() as f64);
        let track = grad_enabled() && self.requires_grad();
        Tensor::make(vec![], vec![m], track, if track { Op::Mean(self.clone()) } else { Op::Leaf })
    }

    /// 2-d convolution over an H x W x Din tensor with a k x k x Din x Dout
    /// kernel, channels-last throughout.
    pub fn conv2d(
        &self,
        kernel: &Tensor<S>,
        bias: Option<&Tensor<S>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<S>> {
        let (h, w, din) = self.dims3()?;
        let (k, kw, kin, dout) = match kernel.shape() {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => {
                return Err(TensorError::ShapeMismatch(format!("conv2d kernel must be 4-d, got {s:?}")))
            }
        };
        if k != kw {
            return Err(TensorError::ShapeMismatch(format!("conv2d kernel must be square, got {k}x{kw}")));
        }
        if k % 2 == 0 {
            return Err(TensorError::InvalidArgument(format!("conv2d kernel size {k} must be odd")));
        }
        if kin != din {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d kernel expects {kin} input channels, tensor has {din}"
            )));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        if let Some(b) = bias {
            if b.shape() != [dout] {
                return Err(TensorError::ShapeMismatch(format!(
                    "conv2d bias shape {:?} vs {dout} output channels",
                    b.shape()
                )));
            }
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d input {h}x{w} with pad {pad} smaller than kernel {k}"
            )));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;

        let mut out = vec![S::zero(); oh * ow * dout];
        {
            let x = self.data();
            let ker = kernel.data();
            let bd = bias.map(|b| b.data());
            for oy in 0..oh {
                for ox in 0..ow {
                    let opx = &mut out[(oy * ow + ox) * dout..(oy * ow + ox + 1) * dout];
                    if let Some(b) = &bd {
                        opx.copy_from_slice(b);
                    }
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let ipx = &x[(iy as usize * w + ix as usize) * din..][..din];
                            let krow = &ker[(ky * k + kx) * din * dout..][..din * dout];
                            for (j, &xv) in ipx.iter().enumerate() {
                                let kr = &krow[j * dout..(j + 1) * dout];
                                for (o, &kv) in opx.iter_mut().zip(kr) {
                                    *o += xv * kv;
                                }
                            }
                        }
                    }
                }
            }
        }

        let track = grad_enabled()
            && (self.requires_grad()
                || kernel.requires_grad()
                || bias.map(|b| b.requires_grad()).unwrap_or(false));
        Ok(Tensor::make(
            vec![oh, ow, dout],
            out,
            track,
            if track {
                Op::Conv2d {
                    input: self.clone(),
                    kernel: kernel.clone(),
                    bias: bias.cloned(),
                    stride,
                    pad,
                }
            } else {
                Op::Leaf
            },
        ))
    }

    /// Per-position softmax over the channel dimension of an H x W x C tensor,
    /// stabilized by max subtraction.
    pub fn softmax_channels(&self) -> Result<Tensor<S>> {
        let (_, _, c) = self.dims3()?;
        if c < 2 {
            return Err(TensorError::InvalidArgument(format!("softmax needs >= 2 channels, got {c}")));
        }
        let x = self.data();
        let mut out = vec![S::zero(); x.len()];
        for (row, orow) in x.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        drop(x);
        Ok(self.unary(out, Op::SoftmaxChannels))
    }

    /// Mean negative log-likelihood of `target` under these probabilities,
    /// skipping ignore-marked positions. All-ignored targets give loss 0.
    pub fn cross_entropy(&self, target: &LabelMap) -> Result<Tensor<S>> {
        let (h, w, c) = self.dims3()?;
        if target.h != h || target.w != w {
            return Err(TensorError::ShapeMismatch(format!(
                "cross_entropy: probs {h}x{w} vs target {}x{}",
                target.h, target.w
            )));
        }
        let floor = S::from_f64_lossy(PROB_FLOOR);
        let mut valid = 0usize;
        let mut acc = S::zero();
        {
            let p = self.data();
            for (pos, &t) in target.data.iter().enumerate() {
                if t == IGNORE_LABEL {
                    continue;
                }
                if t as usize >= c {
                    return Err(TensorError::BadClassIndex { index: t as usize, classes: c });
                }
                valid += 1;
                acc -= p[pos * c + t as usize].max(floor).ln();
            }
        }
        let loss = if valid == 0 { S::zero() } else { acc / S::from_f64_lossy(valid as f64) };
        let track = grad_enabled() && self.requires_grad();
        Ok(Tensor::make(
            vec![],
            vec![loss],
            track,
            if track {
                Op::CrossEntropy { probs: self.clone(), target: target.clone(), valid }
            } else {
                Op::Leaf
            },
        ))
    }

    /// Mean squared error over all elements (divisor = numel).
    pub fn mse(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape(self, other, "mse")?;
        let acc: S = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let loss = acc / S::from_f64_lossy(self.numel() as f64);
        let track = grad_enabled() && (self.requires_grad() || other.requires_grad());
        Ok(Tensor::make(
            vec![],
            vec![loss],
            track,
            if track { Op::Mse(self.clone(), other.clone()) } else { Op::Leaf },
        ))
    }

    /// Nearest-neighbor spatial resize of an H x W x D tensor. Gradients
    /// accumulate into each source cell from all of its replicas.
    pub fn nearest_resize(&self, nh: usize, nw: usize) -> Result<Tensor<S>> {
        let (h, w, d) = self.dims3()?;
        if nh == 0 || nw == 0 {
            return Err(TensorError::InvalidArgument("nearest_resize target must be positive".into()));
        }
        let rows = nearest_index_map(h, nh);
        let cols = nearest_index_map(w, nw);
        let x = self.data();
        let mut out = vec![S::zero(); nh * nw * d];
        for (oy, &sy) in rows.iter().enumerate() {
            for (ox, &sx) in cols.iter().enumerate() {
                out[(oy * nw + ox) * d..][..d].copy_from_slice(&x[(sy * w + sx) * d..][..d]);
            }
        }
        drop(x);
        let track = grad_enabled() && self.requires_grad();
        Ok(Tensor::make(
            vec![nh, nw, d],
            out,
            track,
            if track { Op::NearestResize(self.clone()) } else { Op::Leaf },
        ))
    }

    /// Inverted channel dropout: each channel of an H x W x D tensor is zeroed
    /// with probability `p`, survivors are scaled by 1/(1-p). Returns the
    /// realized keep mask so a paired stream can reuse it.
    pub fn channel_dropout(&self, p: f64, rng: &mut impl rand::Rng) -> Result<(Tensor<S>, Vec<bool>)> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument(format!("dropout probability {p} not in [0,1)")));
        }
        let (_, _, d) = self.dims3()?;
        let keep: Vec<bool> = (0..d).map(|_| rng.gen::<f64>() >= p).collect();
        let out = self.channel_dropout_with_mask(&keep, p)?;
        Ok((out, keep))
    }

    /// Dropout with a fixed keep mask (the paired-stream path).
    pub fn channel_dropout_with_mask(&self, keep: &[bool], p: f64) -> Result<Tensor<S>> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument(format!("dropout probability {p} not in [0,1)")));
        }
        let (_, _, d) = self.dims3()?;
        if keep.len() != d {
            return Err(TensorError::ShapeMismatch(format!(
                "keep mask has {} channels, tensor has {d}",
                keep.len()
            )));
        }
        let scale = S::from_f64_lossy(1.0 / (1.0 - p));
        let x = self.data();
        let mut out = vec![S::zero(); x.len()];
        for (orow, xrow) in out.chunks_exact_mut(d).zip(x.chunks_exact(d)) {
            for ((o, &xv), &k) in orow.iter_mut().zip(xrow).zip(keep) {
                if k {
                    *o = xv * scale;
                }
            }
        }
        drop(x);
        let track = grad_enabled() && self.requires_grad();
        Ok(Tensor::make(
            self.shape().to_vec(),
            out,
            track,
            if track {
                Op::ChannelDropout { input: self.clone(), keep: keep.to_vec(), scale }
            } else {
                Op::Leaf
            },
        ))
    }

    /// Weighted sum of (1 - cos(z, proto)) / tau over the feature vectors at
    /// the given flat spatial positions of an H x W x D tensor. The prototype
    /// is a constant; gradients flow into the features only.
    pub fn cosine_agg_sum(
        &self,
        positions: &[usize],
        weights: &[S],
        proto: &[S],
        tau: S,
    ) -> Result<Tensor<S>> {
        let (h, w, d) = self.dims3()?;
        if positions.len() != weights.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "{} positions vs {} weights",
                positions.len(),
                weights.len()
            )));
        }
        if proto.len() != d {
            return Err(TensorError::ShapeMismatch(format!(
                "prototype has {} dims, features have {d}",
                proto.len()
            )));
        }
        let vnorm = norm(proto);
        if vnorm <= S::zero() {
            return Err(TensorError::InvalidArgument("zero-norm prototype in cosine loss".into()));
        }
        if tau <= S::zero() {
            return Err(TensorError::InvalidArgument("temperature must be positive".into()));
        }
        let mut acc = S::zero();
        {
            let x = self.data();
            for (&pos, &wt) in positions.iter().zip(weights) {
                if pos >= h * w {
                    return Err(TensorError::InvalidArgument(format!(
                        "position {pos} out of range for {h}x{w}"
                    )));
                }
                let z = &x[pos * d..(pos + 1) * d];
                let zn = norm(z);
                if zn <= S::zero() {
                    return Err(TensorError::InvalidArgument(format!(
                        "zero-norm feature vector at position {pos}"
                    )));
                }
                let dot: S = z.iter().zip(proto).map(|(&a, &b)| a * b).sum();
                acc += wt * (S::one() - dot / (zn * vnorm)) / tau;
            }
        }
        let track = grad_enabled() && self.requires_grad();
        Ok(Tensor::make(
            vec![],
            vec![acc],
            track,
            if track {
                Op::CosineAggSum {
                    input: self.clone(),
                    positions: positions.to_vec(),
                    weights: weights.to_vec(),
                    proto: proto.to_vec(),
                    tau,
                }
            } else {
                Op::Leaf
            },
        ))
    }

    /// Per-position argmax over channels with lowest-index tie-break, plus the
    /// winning probability. Not differentiable; outputs are plain values.
    pub fn argmax_channels(&self) -> Result<(LabelMap, Vec<S>)> {
        let (h, w, c) = self.dims3()?;
        if c > IGNORE_LABEL as usize {
            return Err(TensorError::InvalidArgument(format!(
                "{c} classes collide with the ignore marker"
            )));
        }
        let x = self.data();
        let mut labels = Vec::with_capacity(h * w);
        let mut conf = Vec::with_capacity(h * w);
        for row in x.chunks_exact(c) {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            labels.push(best as u8);
            conf.push(row[best]);
        }
        Ok((LabelMap::new(h, w, labels), conf))
    }
}

fn conv2d_backward<S: Scalar>(
    node: &Tensor<S>,
    g: &[S],
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
    sink: &mut HashMap<u64, Vec<S>>,
) {
    let (h, w, din) = input.dims3().expect("conv input is 3-d");
    let (oh, ow, dout) = node.dims3().expect("conv output is 3-d");
    let k = kernel.shape()[0];

    if input.requires_grad() {
        let ker = kernel.data();
        let mut gin = vec![S::zero(); h * w * din];
        for oy in 0..oh {
            for ox in 0..ow {
                let gpx = &g[(oy * ow + ox) * dout..][..dout];
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let gix = &mut gin[(iy as usize * w + ix as usize) * din..][..din];
                        let krow = &ker[(ky * k + kx) * din * dout..][..din * dout];
                        for (j, gi) in gix.iter_mut().enumerate() {
                            let kr = &krow[j * dout..(j + 1) * dout];
                            let mut s = S::zero();
                            for (&gv, &kv) in gpx.iter().zip(kr) {
                                s += gv * kv;
                            }
                            *gi += s;
                        }
                    }
                }
            }
        }
        push(sink, input, |acc| axpy(acc, &gin, S::one()));
    }

    if kernel.requires_grad() {
        let x = input.data();
        let mut gker = vec![S::zero(); k * k * din * dout];
        for oy in 0..oh {
            for ox in 0..ow {
                let gpx = &g[(oy * ow + ox) * dout..][..dout];
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ipx = &x[(iy as usize * w + ix as usize) * din..][..din];
                        let krow = &mut gker[(ky * k + kx) * din * dout..][..din * dout];
                        for (j, &xv) in ipx.iter().enumerate() {
                            let kr = &mut krow[j * dout..(j + 1) * dout];
                            for (kg, &gv) in kr.iter_mut().zip(gpx) {
                                *kg += xv * gv;
                            }
                        }
                    }
                }
            }
        }
        push(sink, kernel, |acc| axpy(acc, &gker, S::one()));
    }

    if let Some(b) = bias {
        if b.requires_grad() {
            let mut gb = vec![S::zero(); dout];
            for gpx in g.chunks_exact(dout) {
                for (a, &gv) in gb.iter_mut().zip(gpx) {
                    *a += gv;
                }
            }
            push(sink, b, |acc| axpy(acc, &gb, S::one()));
        }
    }
}
