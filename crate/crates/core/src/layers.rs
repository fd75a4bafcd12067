//! The layer zoo with hand-written forward and backward passes.
//!
//! Every layer maps one sample tensor to one sample tensor. A forward call
//! pushes whatever the backward pass needs onto a [`GradientTape`]; the
//! matching backward call pops it again, so layers must be unwound in reverse
//! order.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Square kernel, zero "same" padding of `kernel / 2`, configurable stride.
    Conv2D {
        kernel: usize,
        stride: usize,
        in_channels: usize,
        out_channels: usize,
    },
    /// Bias-free 1×1 convolution, weights `(in, out)`.
    PointwiseConv {
        in_channels: usize,
        out_channels: usize,
    },
    /// Bias-free 1×1 transpose convolution, weights `(out, in)`.
    PointwiseTransposeConv {
        in_channels: usize,
        out_channels: usize,
    },
    Dense {
        in_features: usize,
        out_features: usize,
    },
    ReLU,
    /// Non-overlapping `size × size` windows.
    MaxPool2D {
        size: usize,
    },
    GlobalAvgPool,
    Softmax,
}

impl LayerKind {
    pub fn tag(&self) -> u32 {
        match self {
            LayerKind::Conv2D { .. } => 1,
            LayerKind::PointwiseConv { .. } => 2,
            LayerKind::PointwiseTransposeConv { .. } => 3,
            LayerKind::Dense { .. } => 4,
            LayerKind::ReLU => 5,
            LayerKind::MaxPool2D { .. } => 6,
            LayerKind::GlobalAvgPool => 7,
            LayerKind::Softmax => 8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2D { .. } => "conv2d",
            LayerKind::PointwiseConv { .. } => "pointwise_conv",
            LayerKind::PointwiseTransposeConv { .. } => "pointwise_transpose_conv",
            LayerKind::Dense { .. } => "dense",
            LayerKind::ReLU => "relu",
            LayerKind::MaxPool2D { .. } => "maxpool2d",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Softmax => "softmax",
        }
    }

    /// Four integers describing the kind; unused slots are zero.
    pub fn hyper(&self) -> [u32; 4] {
        let u = |v: usize| v as u32;
        match *self {
            LayerKind::Conv2D { kernel, stride, in_channels, out_channels } => {
                [u(kernel), u(stride), u(in_channels), u(out_channels)]
            }
            LayerKind::PointwiseConv { in_channels, out_channels }
            | LayerKind::PointwiseTransposeConv { in_channels, out_channels } => {
                [u(in_channels), u(out_channels), 0, 0]
            }
            LayerKind::Dense { in_features, out_features } => [u(in_features), u(out_features), 0, 0],
            LayerKind::MaxPool2D { size } => [u(size), 0, 0, 0],
            LayerKind::ReLU | LayerKind::GlobalAvgPool | LayerKind::Softmax => [0; 4],
        }
    }

    pub fn from_tag(tag: u32, hyper: [u32; 4]) -> Result<Self> {
        let [a, b, c, d] = hyper.map(|v| v as usize);
        let kind = match tag {
            1 => LayerKind::Conv2D { kernel: a, stride: b, in_channels: c, out_channels: d },
            2 => LayerKind::PointwiseConv { in_channels: a, out_channels: b },
            3 => LayerKind::PointwiseTransposeConv { in_channels: a, out_channels: b },
            4 => LayerKind::Dense { in_features: a, out_features: b },
            5 => LayerKind::ReLU,
            6 => LayerKind::MaxPool2D { size: a },
            7 => LayerKind::GlobalAvgPool,
            8 => LayerKind::Softmax,
            other => return Err(Error::Format(format!("unknown layer tag {other}"))),
        };
        Ok(kind)
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Conv2D { kernel, in_channels, out_channels, .. } => {
                vec![kernel, kernel, in_channels, out_channels]
            }
            LayerKind::PointwiseConv { in_channels, out_channels } => {
                vec![in_channels, out_channels]
            }
            LayerKind::PointwiseTransposeConv { in_channels, out_channels } => {
                vec![out_channels, in_channels]
            }
            LayerKind::Dense { in_features, out_features } => vec![in_features, out_features],
            _ => vec![0],
        }
    }

    pub fn bias_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Conv2D { out_channels, .. } => vec![out_channels],
            LayerKind::Dense { out_features, .. } => vec![out_features],
            _ => vec![0],
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv2D { kernel, in_channels, .. } => kernel * kernel * in_channels,
            LayerKind::PointwiseConv { in_channels, .. } | LayerKind::PointwiseTransposeConv { in_channels, .. } => {
                in_channels
            }
            LayerKind::Dense { in_features, .. } => in_features,
            _ => 0,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = match *self {
            LayerKind::Conv2D { kernel, stride, in_channels, out_channels } => {
                kernel == 0 || stride == 0 || in_channels == 0 || out_channels == 0
            }
            LayerKind::PointwiseConv { in_channels, out_channels }
            | LayerKind::PointwiseTransposeConv { in_channels, out_channels } => in_channels == 0 || out_channels == 0,
            LayerKind::Dense { in_features, out_features } => in_features == 0 || out_features == 0,
            LayerKind::MaxPool2D { size } => size == 0,
            _ => false,
        };
        if bad {
            return Err(Error::Shape(format!("degenerate layer hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// One layer: its kind plus trainable weights and bias. Parameterless kinds
/// (and the bias-free pointwise kinds for `bias`) hold [`Tensor::empty`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub kind: LayerKind,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub fn new(kind: LayerKind, weights: Tensor, bias: Tensor) -> Result<Self> {
        kind.validate()?;
        let want_w = kind.weight_shape();
        let want_b = kind.bias_shape();
        let shape_ok = |t: &Tensor, want: &[usize]| {
            if want == [0] {
                t.is_empty()
            } else {
                t.shape() == want
            }
        };
        if !shape_ok(&weights, &want_w) || !shape_ok(&bias, &want_b) {
            return Err(Error::Shape(format!(
                "{} expects weights {:?} and bias {:?}, got {:?} and {:?}",
                kind.name(),
                want_w,
                want_b,
                weights.shape(),
                bias.shape()
            )));
        }
        let norm = |t: Tensor, want: &[usize]| if want == [0] { Tensor::empty() } else { t };
        Ok(LayerParams { kind, weights: norm(weights, &want_w), bias: norm(bias, &want_b) })
    }

    /// All-zero parameters.
    pub fn zeros(kind: LayerKind) -> Result<Self> {
        let w = kind.weight_shape();
        let b = kind.bias_shape();
        let make = |s: &[usize]| if s == [0] { Tensor::empty() } else { Tensor::zeros(s) };
        LayerParams::new(kind, make(&w), make(&b))
    }

    /// Fan-in scaled normal weights (std `sqrt(gain / fan_in)`), zero bias.
    pub fn init<R: Rng + ?Sized>(kind: LayerKind, gain: f64, rng: &mut R) -> Result<Self> {
        let mut layer = LayerParams::zeros(kind)?;
        if !layer.weights.is_empty() {
            let std = (gain / kind.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in layer.weights.data_mut() {
                *w = normal.sample(rng);
            }
        }
        Ok(layer)
    }

    pub fn has_params(&self) -> bool {
        !self.weights.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = || Err(Error::Shape(format!("{} cannot take input of shape {:?}", self.kind.name(), input)));
        match (self.kind, input) {
            (LayerKind::Conv2D { kernel, stride, in_channels, out_channels }, &[h, w, c]) if c == in_channels => {
                let pad = kernel / 2;
                if h + 2 * pad < kernel || w + 2 * pad < kernel {
                    return mismatch();
                }
                Ok(vec![(h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1, out_channels])
            }
            (LayerKind::PointwiseConv { in_channels, out_channels }, &[h, w, c])
            | (LayerKind::PointwiseTransposeConv { in_channels, out_channels }, &[h, w, c])
                if c == in_channels =>
            {
                Ok(vec![h, w, out_channels])
            }
            (LayerKind::Dense { in_features, out_features }, shape)
                if shape.iter().product::<usize>() == in_features =>
            {
                Ok(vec![out_features])
            }
            (LayerKind::ReLU, shape) => Ok(shape.to_vec()),
            (LayerKind::MaxPool2D { size }, &[h, w, c]) if h >= size && w >= size => Ok(vec![h / size, w / size, c]),
            (LayerKind::GlobalAvgPool, &[h, w, c]) if h * w > 0 => Ok(vec![c]),
            (LayerKind::Softmax, &[k]) if k > 0 => Ok(vec![k]),
            _ => mismatch(),
        }
    }
}

#[derive(Clone, Debug)]
enum Cache {
    Input(Tensor),
    Columns(Vec<f64>),
    Argmax(Vec<usize>),
    Output(Tensor),
    Nothing,
}

#[derive(Clone, Debug)]
struct TapeEntry {
    kind: LayerKind,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    cache: Cache,
}

/// Stack of per-layer forward records.
#[derive(Clone, Debug, Default)]
pub struct GradientTape {
    entries: Vec<TapeEntry>,
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Drops the most recent record after checking that it belongs to `kind`.
    pub fn discard(&mut self, kind: LayerKind) -> Result<()> {
        self.pop(kind).map(|_| ())
    }

    fn pop(&mut self, kind: LayerKind) -> Result<TapeEntry> {
        match self.entries.pop() {
            Some(e) if e.kind == kind => Ok(e),
            Some(e) => {
                let msg = format!("backward for {:?} but tape top is {:?}", kind, e.kind);
                self.entries.push(e);
                Err(Error::Tape(msg))
            }
            None => Err(Error::Tape(format!("backward for {kind:?} on an empty tape"))),
        }
    }
}

/// Gradients produced by one backward call.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn forward(layer: &LayerParams, input: &Tensor, tape: &mut GradientTape) -> Result<Tensor> {
    let (out, cache) = forward_impl(layer, input)?;
    let out = out.ensure_finite(layer.kind.name())?;
    tape.entries.push(TapeEntry {
        kind: layer.kind,
        input_shape: input.shape().to_vec(),
        output_shape: out.shape().to_vec(),
        cache,
    });
    Ok(out)
}

/// Forward pass without recording anything.
pub fn apply(layer: &LayerParams, input: &Tensor) -> Result<Tensor> {
    let (out, _) = forward_impl(layer, input)?;
    out.ensure_finite(layer.kind.name())
}

fn forward_impl(layer: &LayerParams, input: &Tensor) -> Result<(Tensor, Cache)> {
    let out_shape = layer.output_shape(input.shape())?;
    let x = input.data();
    match layer.kind {
        LayerKind::Conv2D { kernel, stride, in_channels, out_channels } => {
            let (h, w, _) = input.spatial_dims()?;
            let (oh, ow) = (out_shape[0], out_shape[1]);
            let cols = im2col(x, h, w, in_channels, kernel, stride, oh, ow);
            let patch = kernel * kernel * in_channels;
            let mut out = vec![0.0; oh * ow * out_channels];
            gemm(oh * ow, patch, out_channels, &cols, layer.weights.data(), &mut out, false);
            add_bias_rows(&mut out, layer.bias.data());
            Ok((Tensor::new(out_shape, out)?, Cache::Columns(cols)))
        }
        LayerKind::PointwiseConv { in_channels, out_channels } => {
            let rows = x.len() / in_channels;
            let mut out = vec![0.0; rows * out_channels];
            gemm(rows, in_channels, out_channels, x, layer.weights.data(), &mut out, false);
            Ok((Tensor::new(out_shape, out)?, Cache::Input(input.clone())))
        }
        LayerKind::PointwiseTransposeConv { in_channels, out_channels } => {
            let rows = x.len() / in_channels;
            let mut out = vec![0.0; rows * out_channels];
            gemm_nt(rows, in_channels, out_channels, x, layer.weights.data(), &mut out, false);
            Ok((Tensor::new(out_shape, out)?, Cache::Input(input.clone())))
        }
        LayerKind::Dense { in_features, out_features } => {
            let mut out = layer.bias.data().to_vec();
            gemm(1, in_features, out_features, x, layer.weights.data(), &mut out, true);
            Ok((Tensor::new(out_shape, out)?, Cache::Input(input.clone())))
        }
        LayerKind::ReLU => Ok((input.map(|v| v.max(0.0)), Cache::Input(input.clone()))),
        LayerKind::MaxPool2D { size } => {
            let (h, w, c) = input.spatial_dims()?;
            let _ = h;
            let (oh, ow) = (out_shape[0], out_shape[1]);
            let mut out = vec![0.0; oh * ow * c];
            let mut arg = vec![0usize; oh * ow * c];
            for i in 0..oh {
                for j in 0..ow {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        for di in 0..size {
                            for dj in 0..size {
                                let idx = ((i * size + di) * w + (j * size + dj)) * c + ch;
                                if best == usize::MAX || x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                        }
                        let o = (i * ow + j) * c + ch;
                        out[o] = x[best];
                        arg[o] = best;
                    }
                }
            }
            Ok((Tensor::new(out_shape, out)?, Cache::Argmax(arg)))
        }
        LayerKind::GlobalAvgPool => {
            let (h, w, c) = input.spatial_dims()?;
            let mut out = vec![0.0; c];
            for px in x.chunks_exact(c) {
                for (o, v) in out.iter_mut().zip(px) {
                    *o += v;
                }
            }
            let n = (h * w) as f64;
            out.iter_mut().for_each(|v| *v /= n);
            Ok((Tensor::new(out_shape, out)?, Cache::Nothing))
        }
        LayerKind::Softmax => {
            let p = softmax(x);
            let t = Tensor::new(out_shape, p)?;
            Ok((t.clone(), Cache::Output(t)))
        }
    }
}

pub fn backward(layer: &LayerParams, upstream: &Tensor, tape: &mut GradientTape) -> Result<LayerGrad> {
    let entry = tape.pop(layer.kind)?;
    if upstream.shape() != entry.output_shape.as_slice() {
        return Err(Error::Shape(format!(
            "{} backward: upstream {:?} but forward produced {:?}",
            layer.kind.name(),
            upstream.shape(),
            entry.output_shape
        )));
    }
    let g = upstream.data();
    let no_params = || (Tensor::empty(), Tensor::empty());
    let (input, (weights, bias)) = match (layer.kind, entry.cache) {
        (LayerKind::Conv2D { kernel, stride, in_channels, out_channels }, Cache::Columns(cols)) => {
            let (h, w) = (entry.input_shape[0], entry.input_shape[1]);
            let (oh, ow) = (entry.output_shape[0], entry.output_shape[1]);
            let patch = kernel * kernel * in_channels;
            let rows = oh * ow;
            let mut dw = vec![0.0; patch * out_channels];
            gemm_tn(patch, rows, out_channels, &cols, g, &mut dw, false);
            let db = column_sums(g, out_channels);
            let mut dcols = vec![0.0; rows * patch];
            gemm_nt(rows, out_channels, patch, g, layer.weights.data(), &mut dcols, false);
            let dx = col2im(&dcols, h, w, in_channels, kernel, stride, oh, ow);
            (Tensor::new(entry.input_shape, dx)?, (Tensor::new(layer.kind.weight_shape(), dw)?, Tensor::vector(db)))
        }
        (LayerKind::PointwiseConv { in_channels, out_channels }, Cache::Input(x)) => {
            let rows = x.len() / in_channels;
            let mut dw = vec![0.0; in_channels * out_channels];
            gemm_tn(in_channels, rows, out_channels, x.data(), g, &mut dw, false);
            let mut dx = vec![0.0; rows * in_channels];
            gemm_nt(rows, out_channels, in_channels, g, layer.weights.data(), &mut dx, false);
            (Tensor::new(entry.input_shape, dx)?, (Tensor::new(layer.kind.weight_shape(), dw)?, Tensor::empty()))
        }
        (LayerKind::PointwiseTransposeConv { in_channels, out_channels }, Cache::Input(x)) => {
            let rows = x.len() / in_channels;
            // y = x Wᵀ with W: (out, in)
            let mut dw = vec![0.0; out_channels * in_channels];
            gemm_tn(out_channels, rows, in_channels, g, x.data(), &mut dw, false);
            let mut dx = vec![0.0; rows * in_channels];
            gemm(rows, out_channels, in_channels, g, layer.weights.data(), &mut dx, false);
            (Tensor::new(entry.input_shape, dx)?, (Tensor::new(layer.kind.weight_shape(), dw)?, Tensor::empty()))
        }
        (LayerKind::Dense { in_features, out_features }, Cache::Input(x)) => {
            let mut dw = vec![0.0; in_features * out_features];
            gemm_tn(in_features, 1, out_features, x.data(), g, &mut dw, false);
            let mut dx = vec![0.0; in_features];
            gemm_nt(1, out_features, in_features, g, layer.weights.data(), &mut dx, false);
            (
                Tensor::new(entry.input_shape, dx)?,
                (Tensor::new(layer.kind.weight_shape(), dw)?, Tensor::vector(g.to_vec())),
            )
        }
        (LayerKind::ReLU, Cache::Input(x)) => {
            let dx = x.data().iter().zip(g).map(|(&v, &u)| if v > 0.0 { u } else { 0.0 }).collect();
            (Tensor::new(entry.input_shape, dx)?, no_params())
        }
        (LayerKind::MaxPool2D { .. }, Cache::Argmax(arg)) => {
            let mut dx = vec![0.0; entry.input_shape.iter().product()];
            for (&src, &u) in arg.iter().zip(g) {
                dx[src] += u;
            }
            (Tensor::new(entry.input_shape, dx)?, no_params())
        }
        (LayerKind::GlobalAvgPool, Cache::Nothing) => {
            let (h, w, c) = (entry.input_shape[0], entry.input_shape[1], entry.input_shape[2]);
            let n = (h * w) as f64;
            let mut dx = vec![0.0; h * w * c];
            for px in dx.chunks_exact_mut(c) {
                for (d, u) in px.iter_mut().zip(g) {
                    *d = u / n;
                }
            }
            (Tensor::new(entry.input_shape, dx)?, no_params())
        }
        (LayerKind::Softmax, Cache::Output(p)) => {
            let p = p.data();
            let gp: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
            let dx = p.iter().zip(g).map(|(&pi, &gi)| pi * (gi - gp)).collect();
            (Tensor::new(entry.input_shape, dx)?, no_params())
        }
        (kind, _) => return Err(Error::Tape(format!("corrupt tape record for {kind:?}"))),
    };
    let input = input.ensure_finite(layer.kind.name())?;
    Ok(LayerGrad { input, weights, bias })
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// Gradient of `cross_entropy(softmax(z), target)` with respect to the
/// logits `z`, given `probs = softmax(z)`.
pub fn softmax_cross_entropy_grad(probs: &Tensor, target: &Tensor) -> Result<Tensor> {
    probs.sub(target)
}

pub fn cross_entropy(probs: &[f64], target: &[f64]) -> f64 {
    -probs.iter().zip(target).filter(|(_, &t)| t != 0.0).map(|(&p, &t)| t * p.ln()).sum::<f64>()
}

fn add_bias_rows(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn column_sums(g: &[f64], cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    for row in g.chunks_exact(cols) {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    s
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], h: usize, w: usize, c: usize, k: usize, stride: usize, oh: usize, ow: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let patch = k * k * c;
    let mut cols = vec![0.0; oh * ow * patch];
    for i in 0..oh {
        for j in 0..ow {
            let row = &mut cols[(i * ow + j) * patch..(i * ow + j + 1) * patch];
            for di in 0..k {
                let ii = (i * stride + di) as isize - pad;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dj in 0..k {
                    let jj = (j * stride + dj) as isize - pad;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let src = (ii as usize * w + jj as usize) * c;
                    let dst = (di * k + dj) * c;
                    row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], h: usize, w: usize, c: usize, k: usize, stride: usize, oh: usize, ow: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let patch = k * k * c;
    let mut x = vec![0.0; h * w * c];
    for i in 0..oh {
        for j in 0..ow {
            let row = &cols[(i * ow + j) * patch..(i * ow + j + 1) * patch];
            for di in 0..k {
                let ii = (i * stride + di) as isize - pad;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dj in 0..k {
                    let jj = (j * stride + dj) as isize - pad;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    let dst = (ii as usize * w + jj as usize) * c;
                    let src = (di * k + dj) * c;
                    for ch in 0..c {
                        x[dst + ch] += row[src + ch];
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fd_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Uniform;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let u = Uniform::new(-1.0, 1.0).unwrap();
        let n = shape.iter().product();
        // keep away from ReLU / max-pool kinks
        let data = (0..n)
            .map(|_| {
                let v: f64 = u.sample(rng);
                if v.abs() < 1e-2 {
                    v.signum() * 1e-2 + v
                } else {
                    v
                }
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    /// Scalar functional `sum(weights ⊙ layer(x))` with its analytic gradient.
    fn probe(layer: &LayerParams, x: &Tensor, probe: &Tensor) -> (f64, LayerGrad) {
        let mut tape = GradientTape::new();
        let y = forward(layer, x, &mut tape).unwrap();
        let v = y.dot(probe);
        let g = backward(layer, probe, &mut tape).unwrap();
        assert!(tape.is_empty());
        (v, g)
    }

    fn check_layer(kind: LayerKind, in_shape: &[usize], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = LayerParams::init(kind, 2.0, &mut rng).unwrap();
        if !layer.bias.is_empty() {
            layer.bias = random_tensor(layer.bias.shape(), &mut rng);
        }
        let x = random_tensor(in_shape, &mut rng);
        let out_shape = layer.output_shape(in_shape).unwrap();
        let p = random_tensor(&out_shape, &mut rng);

        let err = fd_check(
            |x| {
                let (v, g) = probe(&layer, x, &p);
                (v, g.input)
            },
            &x,
            1e-5,
        );
        assert!(err < 1e-4, "{kind:?} input grad error {err}");

        if layer.has_params() {
            let err = fd_check(
                |w| {
                    let mut l = layer.clone();
                    l.weights = w.clone();
                    let (v, g) = probe(&l, &x, &p);
                    (v, g.weights)
                },
                &layer.weights,
                1e-5,
            );
            assert!(err < 1e-4, "{kind:?} weight grad error {err}");
        }
        if !layer.bias.is_empty() {
            let err = fd_check(
                |b| {
                    let mut l = layer.clone();
                    l.bias = b.clone();
                    let (v, g) = probe(&l, &x, &p);
                    (v, g.bias)
                },
                &layer.bias,
                1e-5,
            );
            assert!(err < 1e-4, "{kind:?} bias grad error {err}");
        }
    }

    #[test]
    fn relu_forward_and_backward() {
        let layer = LayerParams::zeros(LayerKind::ReLU).unwrap();
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        let mut tape = GradientTape::new();
        let y = forward(&layer, &x, &mut tape).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = backward(&layer, &Tensor::vector(vec![1.0, 1.0, 1.0]), &mut tape).unwrap();
        assert_eq!(g.input.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn pointwise_identity_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = Tensor::zeros(&[5, 5]);
        for i in 0..5 {
            w.data_mut()[i * 5 + i] = 1.0;
        }
        let kind = LayerKind::PointwiseConv { in_channels: 5, out_channels: 5 };
        let layer = LayerParams::new(kind, w, Tensor::empty()).unwrap();
        let f = random_tensor(&[3, 4, 5], &mut rng);
        assert_eq!(apply(&layer, &f).unwrap(), f);
    }

    #[test]
    fn conv_box_sum_matches_nested_loops() {
        let kind = LayerKind::Conv2D { kernel: 3, stride: 1, in_channels: 1, out_channels: 1 };
        let layer = LayerParams::new(kind, Tensor::full(&[3, 3, 1, 1], 1.0), Tensor::zeros(&[1])).unwrap();
        let img: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let x = Tensor::new(vec![5, 5, 1], img.clone()).unwrap();
        let y = apply(&layer, &x).unwrap();
        assert_eq!(y.shape(), &[5, 5, 1]);
        for i in 0..5i64 {
            for j in 0..5i64 {
                let mut s = 0.0;
                for di in -1..=1 {
                    for dj in -1..=1 {
                        let (a, b) = (i + di, j + dj);
                        if (0..5).contains(&a) && (0..5).contains(&b) {
                            s += img[(a * 5 + b) as usize];
                        }
                    }
                }
                assert_eq!(y.data()[(i * 5 + j) as usize], s);
            }
        }
        // the interior 3×3 block is the plain box sum of the 5×5 ramp
        assert_eq!(y.data()[6], 0.0 + 1.0 + 2.0 + 5.0 + 6.0 + 7.0 + 10.0 + 11.0 + 12.0);
    }

    #[test]
    fn softmax_ce_fused_gradient() {
        let p = Tensor::vector(softmax(&[0.0, 0.0]));
        let g = softmax_cross_entropy_grad(&p, &Tensor::vector(vec![1.0, 0.0])).unwrap();
        assert_eq!(g.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn softmax_is_on_the_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let z = random_tensor(&[6], &mut rng).scale(10.0);
            let p = softmax(z.data());
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn every_layer_kind_passes_gradient_checks() {
        for seed in 0..20 {
            check_layer(LayerKind::Conv2D { kernel: 3, stride: 1, in_channels: 2, out_channels: 3 }, &[5, 4, 2], seed);
            check_layer(LayerKind::Conv2D { kernel: 3, stride: 2, in_channels: 2, out_channels: 2 }, &[5, 5, 2], seed);
            check_layer(LayerKind::PointwiseConv { in_channels: 4, out_channels: 3 }, &[3, 2, 4], seed);
            check_layer(LayerKind::PointwiseTransposeConv { in_channels: 3, out_channels: 4 }, &[2, 3, 3], seed);
            check_layer(LayerKind::Dense { in_features: 12, out_features: 4 }, &[2, 2, 3], seed);
            check_layer(LayerKind::ReLU, &[3, 3, 2], seed);
            check_layer(LayerKind::MaxPool2D { size: 2 }, &[4, 4, 2], seed);
            check_layer(LayerKind::GlobalAvgPool, &[3, 3, 4], seed);
            check_layer(LayerKind::Softmax, &[5], seed);
        }
    }

    #[test]
    fn backward_rejects_mismatched_tape() {
        let relu = LayerParams::zeros(LayerKind::ReLU).unwrap();
        let sm = LayerParams::zeros(LayerKind::Softmax).unwrap();
        let mut tape = GradientTape::new();
        assert!(matches!(backward(&relu, &Tensor::vector(vec![1.0]), &mut tape), Err(Error::Tape(_))));
        forward(&relu, &Tensor::vector(vec![1.0, 2.0]), &mut tape).unwrap();
        assert!(matches!(backward(&sm, &Tensor::vector(vec![1.0, 2.0]), &mut tape), Err(Error::Tape(_))));
        // the relu record survives the failed call
        assert!(backward(&relu, &Tensor::vector(vec![1.0, 2.0]), &mut tape).is_ok());
    }

    #[test]
    fn shape_errors_are_reported() {
        let kind = LayerKind::PointwiseConv { in_channels: 4, out_channels: 2 };
        let layer = LayerParams::zeros(kind).unwrap();
        assert!(matches!(apply(&layer, &Tensor::zeros(&[2, 2, 3])), Err(Error::Shape(_))));
        assert!(LayerParams::new(kind, Tensor::zeros(&[4, 2]), Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn pointwise_layers_are_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in [
            LayerKind::PointwiseConv { in_channels: 6, out_channels: 3 },
            LayerKind::PointwiseTransposeConv { in_channels: 6, out_channels: 3 },
        ] {
            let layer = LayerParams::init(kind, 1.0, &mut rng).unwrap();
            let x = random_tensor(&[4, 4, 6], &mut rng);
            let y = random_tensor(&[4, 4, 6], &mut rng);
            let (a, b) = (1.7, -0.3);
            let mut mix = x.scale(a);
            mix.axpy(b, &y).unwrap();
            let lhs = apply(&layer, &mix).unwrap();
            let mut rhs = apply(&layer, &x).unwrap().scale(a);
            rhs.axpy(b, &apply(&layer, &y).unwrap()).unwrap();
            assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-10);
            assert_eq!(apply(&layer, &Tensor::zeros(&[4, 4, 6])).unwrap().max_abs(), 0.0);
        }
    }
}
