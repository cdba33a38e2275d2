//! Layer kinds with hand-derived backward passes.
//!
//! Every layer keeps a LIFO tape of forward records: `forward` pushes one,
//! `backward` pops one. A layer may therefore be applied several times in a
//! graph (for example a shared output head) as long as the backward calls
//! happen in reverse order. `infer` evaluates without recording.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::gemm::{matmul, matmul_nt, matmul_tn};
use super::tensor::{downsample2, downsample2_backward, upsample2, upsample2_backward, Tensor4};
use super::Float;
use crate::error::{Error, Result};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Standard deviation of the Gaussian weight initializer.
pub const INIT_STD: f64 = 0.02;
pub const LEAKY_SLOPE: Float = 0.2;

/// A learnable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<Float>,
    pub grad: Vec<Float>,
    id: u64,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<Float>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let n = value.len();
        Self {
            name: name.into(),
            shape,
            value,
            grad: vec![0.0; n],
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: Float) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![v; n])
    }

    pub fn gaussian(name: impl Into<String>, shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as Float)
            .collect();
        Self::new(name, shape, value)
    }

    /// Process-unique identity, stable for the lifetime of the tensor.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv,
    ConvTranspose,
    InstanceNorm,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    ResidualBlock,
    ResizeUp,
    ResizeDown,
}

/// Static description of one layer, used for shape algebra and hashing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    fn pointwise(kind: LayerKind, channels: usize) -> Self {
        Self {
            kind,
            kernel: 1,
            stride: 1,
            padding: 0,
            in_channels: channels,
            out_channels: channels,
        }
    }

    /// Spatial output size for an `h x w` input, or `None` if it is invalid.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        match self.kind {
            LayerKind::Conv => {
                let f = |n: usize| {
                    let span = n + 2 * self.padding;
                    (span >= self.kernel).then(|| (span - self.kernel) / self.stride + 1)
                };
                Some((f(h)?, f(w)?))
            }
            LayerKind::ConvTranspose => {
                let f = |n: usize| (n.checked_sub(1)? * self.stride + self.kernel).checked_sub(2 * self.padding);
                Some((f(h)?, f(w)?))
            }
            LayerKind::ResizeUp => Some((2 * h, 2 * w)),
            LayerKind::ResizeDown => (h % 2 == 0 && w % 2 == 0).then_some((h / 2, w / 2)),
            _ => Some((h, w)),
        }
    }
}

/// Common interface of layers and networks.
pub trait Module {
    /// Evaluates and records what `backward` needs.
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4>;
    /// Evaluates without recording.
    fn infer(&self, x: &Tensor4) -> Result<Tensor4>;
    /// Consumes the most recent record; accumulates parameter gradients and
    /// returns the gradient with respect to the recorded input.
    fn backward(&mut self, grad: &Tensor4) -> Result<Tensor4>;
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));
    fn clear_tape(&mut self);
    fn describe(&self, out: &mut Vec<LayerSpec>);

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }
}

fn no_record(layer: &str) -> Error {
    Error::State(format!("{layer}: backward called without a matching forward"))
}

/// Output columns `lo..hi` whose input column `ox * s + kx - p` lies in
/// `0..w`, and the input column of `lo`.
fn valid_columns(w: usize, k_off: usize, s: usize, p: usize, ow: usize) -> (usize, usize, usize) {
    let lo = if p > k_off { (p - k_off).div_ceil(s) } else { 0 }.min(ow);
    let hi = ((w + p).saturating_sub(k_off)).div_ceil(s).clamp(lo, ow);
    (lo, hi, (lo * s + k_off).saturating_sub(p))
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[Float], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, oh: usize, ow: usize, cols: &mut [Float]) {
    let l = oh * ow;
    if l == 0 {
        return;
    }
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * l..(row + 1) * l];
                let (lo, hi, ix0) = valid_columns(w, kx, s, p, ow);
                for (oy, seg) in dst.chunks_exact_mut(ow).enumerate() {
                    let iy = oy * s + ky;
                    if iy < p || iy - p >= h || lo == hi {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &plane[(iy - p) * w..(iy - p + 1) * w];
                    seg[..lo].fill(0.0);
                    seg[hi..].fill(0.0);
                    if s == 1 {
                        seg[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (v, &x) in seg[lo..hi].iter_mut().zip(src[ix0..].iter().step_by(s)) {
                            *v = x;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[Float], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, oh: usize, ow: usize, x: &mut [Float]) {
    let l = oh * ow;
    if l == 0 {
        return;
    }
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * l..(row + 1) * l];
                let (lo, hi, ix0) = valid_columns(w, kx, s, p, ow);
                if lo == hi {
                    continue;
                }
                for (oy, seg) in src.chunks_exact(ow).enumerate() {
                    let iy = oy * s + ky;
                    if iy < p || iy - p >= h {
                        continue;
                    }
                    let dst = &mut plane[(iy - p) * w..(iy - p + 1) * w];
                    for (d, &v) in dst[ix0..].iter_mut().step_by(s).zip(&seg[lo..hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct ConvRecord {
    in_shape: [usize; 4],
    cols: Vec<Float>,
}

/// 2-D convolution (cross-correlation) with zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param,
    pub bias: Param,
    tape: Vec<ConvRecord>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::with_std(name, in_channels, out_channels, kernel, stride, padding, INIT_STD, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_std(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::gaussian(format!("{name}.weight"), vec![out_channels, in_channels, kernel, kernel], std, rng),
            bias: Param::filled(format!("{name}.bias"), vec![out_channels], 0.0),
            tape: Vec::new(),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::Conv,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
        }
    }

    fn eval(&self, x: &Tensor4) -> Result<(Tensor4, ConvRecord)> {
        let [n, c, h, w] = x.shape();
        if c != self.in_channels {
            return Err(Error::Size(format!(
                "{}: expected {} input channels, got {c}",
                self.name, self.in_channels
            )));
        }
        let (oh, ow) = self.spec().output_hw(h, w).ok_or_else(|| {
            Error::Size(format!("{}: input {h}x{w} smaller than kernel {}", self.name, self.kernel))
        })?;
        let (k, o) = (self.kernel, self.out_channels);
        let ckk = c * k * k;
        let l = oh * ow;
        let mut cols = vec![0.0; n * ckk * l];
        let mut out = Tensor4::zeros([n, o, oh, ow]);
        for b in 0..n {
            let col = &mut cols[b * ckk * l..(b + 1) * ckk * l];
            im2col(x.sample(b), c, h, w, k, self.stride, self.padding, oh, ow, col);
            let y = out.sample_mut(b);
            for (oc, row) in y.chunks_mut(l).enumerate() {
                row.fill(self.bias.value[oc]);
            }
            matmul(o, ckk, l, &self.weight.value, col, y, true);
        }
        Ok((out, ConvRecord { in_shape: x.shape(), cols }))
    }
}

impl Module for Conv2d {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let (y, rec) = self.eval(x)?;
        self.tape.push(rec);
        Ok(y)
    }

    fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        self.eval(x).map(|(y, _)| y)
    }

    fn backward(&mut self, g: &Tensor4) -> Result<Tensor4> {
        let rec = self.tape.pop().ok_or_else(|| no_record(&self.name))?;
        let [n, c, h, w] = rec.in_shape;
        let (oh, ow) = self.spec().output_hw(h, w).expect("recorded shape is valid");
        g.expect_shape([n, self.out_channels, oh, ow], &self.name)?;
        let (k, o) = (self.kernel, self.out_channels);
        let ckk = c * k * k;
        let l = oh * ow;
        let mut dx = Tensor4::zeros(rec.in_shape);
        let mut dcols = vec![0.0; ckk * l];
        for b in 0..n {
            let gb = g.sample(b);
            let col = &rec.cols[b * ckk * l..(b + 1) * ckk * l];
            matmul_nt(o, l, ckk, gb, col, &mut self.weight.grad, true);
            for (oc, row) in gb.chunks(l).enumerate() {
                self.bias.grad[oc] += row.iter().sum::<Float>();
            }
            matmul_tn(ckk, o, l, &self.weight.value, gb, &mut dcols, false);
            col2im(&dcols, c, h, w, k, self.stride, self.padding, oh, ow, dx.sample_mut(b));
        }
        Ok(dx)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn clear_tape(&mut self) {
        self.tape.clear();
    }

    fn describe(&self, out: &mut Vec<LayerSpec>) {
        out.push(self.spec());
    }
}

/// Transposed convolution; weight layout `(in, out, k, k)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param,
    pub bias: Param,
    tape: Vec<Tensor4>,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::gaussian(format!("{name}.weight"), vec![in_channels, out_channels, kernel, kernel], INIT_STD, rng),
            bias: Param::filled(format!("{name}.bias"), vec![out_channels], 0.0),
            tape: Vec::new(),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec {
            kind: LayerKind::ConvTranspose,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
        }
    }

    fn eval(&self, x: &Tensor4) -> Result<Tensor4> {
        let [n, c, h, w] = x.shape();
        if c != self.in_channels {
            return Err(Error::Size(format!(
                "{}: expected {} input channels, got {c}",
                self.name, self.in_channels
            )));
        }
        let (oh, ow) = self
            .spec()
            .output_hw(h, w)
            .ok_or_else(|| Error::Size(format!("{}: invalid input size {h}x{w}", self.name)))?;
        let (k, o) = (self.kernel, self.out_channels);
        let okk = o * k * k;
        let l = h * w;
        let mut cols = vec![0.0; okk * l];
        let mut out = Tensor4::zeros([n, o, oh, ow]);
        for b in 0..n {
            matmul_tn(okk, c, l, &self.weight.value, x.sample(b), &mut cols, false);
            let y = out.sample_mut(b);
            for (oc, plane) in y.chunks_mut(oh * ow).enumerate() {
                plane.fill(self.bias.value[oc]);
            }
            col2im(&cols, o, oh, ow, k, self.stride, self.padding, h, w, y);
        }
        Ok(out)
    }
}

impl Module for ConvTranspose2d {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let y = self.eval(x)?;
        self.tape.push(x.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        self.eval(x)
    }

    fn backward(&mut self, g: &Tensor4) -> Result<Tensor4> {
        let x = self.tape.pop().ok_or_else(|| no_record(&self.name))?;
        let [n, c, h, w] = x.shape();
        let (oh, ow) = self.spec().output_hw(h, w).expect("recorded shape is valid");
        g.expect_shape([n, self.out_channels, oh, ow], &self.name)?;
        let (k, o) = (self.kernel, self.out_channels);
        let okk = o * k * k;
        let l = h * w;
        let mut dcols = vec![0.0; okk * l];
        let mut dx = Tensor4::zeros(x.shape());
        for b in 0..n {
            let gb = g.sample(b);
            for (oc, plane) in gb.chunks(oh * ow).enumerate() {
                self.bias.grad[oc] += plane.iter().sum::<Float>();
            }
            im2col(gb, o, oh, ow, k, self.stride, self.padding, h, w, &mut dcols);
            matmul_nt(c, l, okk, x.sample(b), &dcols, &mut self.weight.grad, true);
            matmul(c, okk, l, &self.weight.value, &dcols, dx.sample_mut(b), false);
        }
        Ok(dx)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn clear_tape(&mut self) {
        self.tape.clear();
    }

    fn describe(&self, out: &mut Vec<LayerSpec>) {
        out.push(self.spec());
    }
}

#[derive(Debug, Clone)]
struct NormRecord {
    xhat: Tensor4,
    inv_std: Vec<Float>,
}

/// Per-sample, per-channel normalization with a learnable affine.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
    pub gamma: Param,
    pub beta: Param,
    tape: Vec<NormRecord>,
}

impl InstanceNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            channels,
            eps: 1e-5,
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], 1.0),
            beta: Param::filled(format!("{name}.beta"), vec![channels], 0.0),
            tape: Vec::new(),
        }
    }

    /// Normalized input before the affine transform.
    pub fn normalize(&self, x: &Tensor4) -> Result<(Tensor4, Vec<Float>)> {
        let [n, c, h, w] = x.shape();
        if c != self.channels {
            return Err(Error::Size(format!(
                "{}: expected {} channels, got {c}",
                self.name, self.channels
            )));
        }
        let hw = h * w;
        let mut xhat = Tensor4::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(n * c);
        for p in 0..n * c {
            let src = &x.data[p * hw..(p + 1) * hw];
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + self.eps).sqrt();
            for (d, &v) in xhat.data[p * hw..(p + 1) * hw].iter_mut().zip(src) {
                *d = ((v as f64 - mean) * is) as Float;
            }
            inv_std.push(is as Float);
        }
        Ok((xhat, inv_std))
    }

    fn eval(&self, x: &Tensor4) -> Result<(Tensor4, NormRecord)> {
        let (xhat, inv_std) = self.normalize(x)?;
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let mut y = xhat.clone();
        for b in 0..n {
            for ch in 0..c {
                let (g, be) = (self.gamma.value[ch], self.beta.value[ch]);
                let p = b * c + ch;
                y.data[p * hw..(p + 1) * hw].iter_mut().for_each(|v| *v = g * *v + be);
            }
        }
        Ok((y, NormRecord { xhat, inv_std }))
    }
}

impl Module for InstanceNorm {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let (y, rec) = self.eval(x)?;
        self.tape.push(rec);
        Ok(y)
    }

    fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        self.eval(x).map(|(y, _)| y)
    }

    fn backward(&mut self, g: &Tensor4) -> Result<Tensor4> {
        let rec = self.tape.pop().ok_or_else(|| no_record(&self.name))?;
        g.expect_shape(rec.xhat.shape(), &self.name)?;
        let [n, c, h, w] = g.shape();
        let hw = h * w;
        let mut dx = Tensor4::zeros(g.shape());
        for b in 0..n {
            for ch in 0..c {
                let p = b * c + ch;
                let gs = &g.data[p * hw..(p + 1) * hw];
                let xs = &rec.xhat.data[p * hw..(p + 1) * hw];
                let gamma = self.gamma.value[ch] as f64;
                let mut sum_g = 0f64;
                let mut sum_gx = 0f64;
                for (&gv, &xv) in gs.iter().zip(xs) {
                    sum_g += gv as f64;
                    sum_gx += gv as f64 * xv as f64;
                }
                self.gamma.grad[ch] += sum_gx as Float;
                self.beta.grad[ch] += sum_g as Float;
                let is = rec.inv_std[p] as f64;
                let m = hw as f64;
                for ((d, &gv), &xv) in dx.data[p * hw..(p + 1) * hw].iter_mut().zip(gs).zip(xs) {
                    let v = gamma * is / m * (m * gv as f64 - sum_g - xv as f64 * sum_gx);
                    *d = v as Float;
                }
            }
        }
        Ok(dx)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn clear_tape(&mut self) {
        self.tape.clear();
    }

    fn describe(&self, out: &mut Vec<LayerSpec>) {
        out.push(LayerSpec::pointwise(LayerKind::InstanceNorm, self.channels));
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActKind {
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

#[inline]
fn sigmoid(v: Float) -> Float {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Elementwise nonlinearity. The tape keeps the input for the piecewise
/// linear kinds and the output for tanh/sigmoid.
#[derive(Debug, Clone)]
pub struct Activation {
    pub kind: ActKind,
    tape: Vec<Tensor4>,
}

impl Activation {
    pub fn new(kind: ActKind) -> Self {
        Self { kind, tape: Vec::new() }
    }

    fn apply(&self, x: &Tensor4) -> Tensor4 {
        match self.kind {
            ActKind::Relu => x.map(|v| v.max(0.0)),
            ActKind::LeakyRelu => x.map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v }),
            ActKind::Tanh => x.map(|v| v.tanh()),
            ActKind::Sigmoid => x.map(sigmoid),
        }
    }
}

impl Module for Activation {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let y = self.apply(x);
        match self.kind {
            ActKind::Relu | ActKind::LeakyRelu => self.tape.push(x.clone()),
            ActKind::Tanh | ActKind::Sigmoid => self.tape.push(y.clone()),
        }
        Ok(y)
    }

    fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        Ok(self.apply(x))
    }

    fn backward(&mut self, g: &Tensor4) -> Result<Tensor4> {
        let rec = self.tape.pop().ok_or_else(|| no_record("activation"))?;
        g.expect_shape(rec.shape(), "activation")?;
        let mut dx = g.clone();
        let it = dx.data.iter_mut().zip(&rec.data);
        match self.kind {
            ActKind::Relu => it.for_each(|(d, &x)| {
                if x <= 0.0 {
                    *d = 0.0
                }
            }),
            ActKind::LeakyRelu => it.for_each(|(d, &x)| {
                if x <= 0.0 {
                    *d *= LEAKY_SLOPE
                }
            }),
            ActKind::Tanh => it.for_each(|(d, &y)| *d *= 1.0 - y * y),
            ActKind::Sigmoid => it.for_each(|(d, &y)| *d *= y * (1.0 - y)),
        }
        Ok(dx)
    }

    fn visit_params(&self, _: &mut dyn FnMut(&Param)) {}
    fn visit_params_mut(&mut self, _: &mut dyn FnMut(&mut Param)) {}

    fn clear_tape(&mut self) {
        self.tape.clear();
    }

    fn describe(&self, out: &mut Vec<LayerSpec>) {
        let kind = match self.kind {
            ActKind::Relu => LayerKind::Relu,
            ActKind::LeakyRelu => LayerKind::LeakyRelu,
            ActKind::Tanh => LayerKind::Tanh,
            ActKind::Sigmoid => LayerKind::Sigmoid,
        };
        out.push(LayerSpec::pointwise(kind, 0));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeDir {
    /// Nearest-neighbour x2.
    Up,
    /// 2x2 average pooling.
    Down,
}

#[derive(Debug, Clone)]
pub struct Resize {
    pub dir: ResizeDir,
    tape: Vec<[usize; 4]>,
}

impl Resize {
    pub fn new(dir: ResizeDir) -> Self {
        Self { dir, tape: Vec::new() }
    }

    pub fn apply(dir: ResizeDir, x: &Tensor4) -> Result<Tensor4> {
        match dir {
            ResizeDir::Up => Ok(upsample2(x)),
            ResizeDir::Down => downsample2(x),
        }
    }

    pub fn adjoint(dir: ResizeDir, g: &Tensor4) -> Result<Tensor4> {
        match dir {
            ResizeDir::Up => upsample2_backward(g),
            ResizeDir::Down => Ok(downsample2_backward(g)),
        }
    }
}

impl Module for Resize {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let y = Self::apply(self.dir, x)?;
        self.tape.push(x.shape());
        Ok(y)
    }

    fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        Self::apply(self.dir, x)
    }

    fn backward(&mut self, g: &Tensor4) -> Result<Tensor4> {
        let shape = self.tape.pop().ok_or_else(|| no_record("resize"))?;
        let dx = Self::adjoint(self.dir, g)?;
        dx.expect_shape(shape, "resize")?;
        Ok(dx)
    }

    fn visit_params(&self, _: &mut dyn FnMut(&Param)) {}
    fn visit_params_mut(&mut self, _: &mut dyn FnMut(&mut Param)) {}

    fn clear_tape(&mut self) {
        self.tape.clear();
    }

    fn describe(&self, out: &mut Vec<LayerSpec>) {
        let kind = match self.dir {
            ResizeDir::Up => LayerKind::ResizeUp,
            ResizeDir::Down => LayerKind::ResizeDown,
        };
        out.push(LayerSpec::pointwise(kind, 0));
    }
}

/// `x + body(x)`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub channels: usize,
    pub body: Sequential,
}

impl ResidualBlock {
    /// conv3 - instance norm - relu - conv3 - instance norm.
    pub fn new(name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let body = Sequential::new(vec![
            Layer::Conv(Conv2d::new(&format!("{name}.conv1"), channels, channels, 3, 1, 1, rng)),
            Layer::Norm(InstanceNorm::new(&format!("{name}.norm1"), channels)),
            Layer::Act(Activation::new(ActKind::Relu)),
            Layer::Conv(Conv2d::new(&format!("{name}.conv2"), channels, channels, 3, 1, 1, rng)),
            Layer::Norm(InstanceNorm::new(&format!("{name}.norm2"), channels)),
        ]);
        Self { channels, body }
    }
}

impl Module for ResidualBlock {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let mut y = self.body.forward(x)?;
        y.add_assign(x)?;
        Ok(y)
    }

    fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        let mut y = self.body.infer(x)?;
        y.add_assign(x)?;
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor4) -> Result<Tensor4> {
        let mut dx = self.body.backward(g)?;
        dx.add_assign(g)?;
        Ok(dx)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.body.visit_params(f)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.body.visit_params_mut(f)
    }

    fn clear_tape(&mut self) {
        self.body.clear_tape()
    }

    fn describe(&self, out: &mut Vec<LayerSpec>) {
        out.push(LayerSpec::pointwise(LayerKind::ResidualBlock, self.channels));
        self.body.describe(out);
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    ConvTranspose(ConvTranspose2d),
    Norm(InstanceNorm),
    Act(Activation),
    Resize(Resize),
    Residual(ResidualBlock),
}

macro_rules! dispatch {
    ($self:expr, $l:ident => $e:expr) => {
        match $self {
            Layer::Conv($l) => $e,
            Layer::ConvTranspose($l) => $e,
            Layer::Norm($l) => $e,
            Layer::Act($l) => $e,
            Layer::Resize($l) => $e,
            Layer::Residual($l) => $e,
        }
    };
}

impl Layer {
    pub fn act(kind: ActKind) -> Self {
        Layer::Act(Activation::new(kind))
    }

    pub fn resize(dir: ResizeDir) -> Self {
        Layer::Resize(Resize::new(dir))
    }
}

impl Module for Layer {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        dispatch!(self, l => l.forward(x))
    }
    fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        dispatch!(self, l => l.infer(x))
    }
    fn backward(&mut self, g: &Tensor4) -> Result<Tensor4> {
        dispatch!(self, l => l.backward(g))
    }
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        dispatch!(self, l => l.visit_params(f))
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        dispatch!(self, l => l.visit_params_mut(f))
    }
    fn clear_tape(&mut self) {
        dispatch!(self, l => l.clear_tape())
    }
    fn describe(&self, out: &mut Vec<LayerSpec>) {
        dispatch!(self, l => l.describe(out))
    }
}

fn check_finite(t: &Tensor4, what: &str, index: usize) -> Result<()> {
    if cfg!(debug_assertions) && !t.is_finite() {
        return Err(Error::Numeric(format!("non-finite values after {what} of layer {index}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Module for Sequential {
    fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            cur = layer.forward(&cur)?;
            check_finite(&cur, "forward", i)?;
        }
        Ok(cur)
    }

    fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.infer(&cur)?;
        }
        Ok(cur)
    }

    fn backward(&mut self, g: &Tensor4) -> Result<Tensor4> {
        let mut cur = g.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            cur = layer.backward(&cur)?;
            check_finite(&cur, "backward", i)?;
        }
        Ok(cur)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.layers.iter().for_each(|l| l.visit_params(f))
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layers.iter_mut().for_each(|l| l.visit_params_mut(f))
    }

    fn clear_tape(&mut self) {
        self.layers.iter_mut().for_each(|l| l.clear_tape())
    }

    fn describe(&self, out: &mut Vec<LayerSpec>) {
        self.layers.iter().for_each(|l| l.describe(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn tap(h: usize, w: usize, s: usize, p: usize, o: (usize, usize), k: (usize, usize)) -> Option<usize> {
        let iy = (o.0 * s + k.0) as isize - p as isize;
        let ix = (o.1 * s + k.1) as isize - p as isize;
        (iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize).then(|| iy as usize * w + ix as usize)
    }

    #[test]
    fn im2col_and_col2im_match_direct_indexing() {
        use rand::Rng;
        let mut r = rng();
        for k in 1..=5 {
            for s in 1..=3 {
                for p in 0..=3 {
                    for (h, w) in [(1usize, 1usize), (3, 5), (7, 4), (8, 8)] {
                        let (Some(oh), Some(ow)) = ((h + 2 * p).checked_sub(k), (w + 2 * p).checked_sub(k)) else {
                            continue;
                        };
                        let (oh, ow) = (oh / s + 1, ow / s + 1);
                        let c = 2;
                        let x: Vec<Float> = (0..c * h * w).map(|_| r.random_range(-1.0..1.0)).collect();
                        let mut cols = vec![Float::NAN; c * k * k * oh * ow];
                        im2col(&x, c, h, w, k, s, p, oh, ow, &mut cols);
                        let g: Vec<Float> = (0..cols.len()).map(|_| r.random_range(-1.0..1.0)).collect();
                        let mut back = vec![0.0; x.len()];
                        col2im(&g, c, h, w, k, s, p, oh, ow, &mut back);
                        let mut want_back = vec![0.0; x.len()];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    for oy in 0..oh {
                                        for ox in 0..ow {
                                            let at = (((ci * k + ky) * k + kx) * oh + oy) * ow + ox;
                                            let want = match tap(h, w, s, p, (oy, ox), (ky, kx)) {
                                                Some(i) => {
                                                    want_back[ci * h * w + i] += g[at];
                                                    x[ci * h * w + i]
                                                }
                                                None => 0.0,
                                            };
                                            assert_eq!(cols[at], want, "k{k} s{s} p{p} {h}x{w}");
                                        }
                                    }
                                }
                            }
                        }
                        for (a, b) in back.iter().zip(&want_back) {
                            assert!((a - b).abs() <= 1e-5, "k{k} s{s} p{p} {h}x{w}: {a} vs {b}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn identity_1x1_conv() {
        let mut conv = Conv2d::new("c", 3, 3, 1, 1, 0, &mut rng());
        conv.weight.value = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let x = Tensor4::from_vec([2, 3, 2, 2], (0..24).map(|v| v as Float * 0.1).collect()).unwrap();
        assert_eq!(conv.forward(&x).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let mut conv = Conv2d::new("c", 1, 1, 3, 1, 1, &mut rng());
        conv.weight.value = vec![1.0; 9];
        let y = conv.infer(&Tensor4::filled([1, 1, 4, 4], 1.0)).unwrap();
        let expected = [4.0, 6.0, 6.0, 4.0, 6.0, 9.0, 9.0, 6.0, 6.0, 9.0, 9.0, 6.0, 4.0, 6.0, 6.0, 4.0];
        assert_eq!(y.data, expected);
    }

    #[test]
    fn strided_conv_shape() {
        let conv = Conv2d::new("c", 2, 3, 4, 2, 1, &mut rng());
        assert_eq!(conv.infer(&Tensor4::zeros([1, 2, 32, 32])).unwrap().shape(), [1, 3, 16, 16]);
    }

    #[test]
    fn linear_conv_weight_gradient_is_input_correlation() {
        // loss = sum(output): dW[o,c,ky,kx] = sum over output positions of the
        // input under that tap; db = number of output positions.
        let mut conv = Conv2d::new("c", 1, 1, 3, 1, 0, &mut rng());
        let x = Tensor4::from_vec([1, 1, 4, 4], (0..16).map(|v| v as Float).collect()).unwrap();
        let y = conv.forward(&x).unwrap();
        conv.backward(&Tensor4::filled(y.shape(), 1.0)).unwrap();
        for ky in 0..3 {
            for kx in 0..3 {
                let mut s = 0.0;
                for oy in 0..2 {
                    for ox in 0..2 {
                        s += x.at(0, 0, oy + ky, ox + kx);
                    }
                }
                assert_eq!(conv.weight.grad[ky * 3 + kx], s);
            }
        }
        assert_eq!(conv.bias.grad[0], 4.0);
    }

    #[test]
    fn zero_output_grad_gives_zero_param_grads() {
        let mut r = rng();
        let mut net = Sequential::new(vec![
            Layer::Conv(Conv2d::new("a", 2, 4, 3, 1, 1, &mut r)),
            Layer::Norm(InstanceNorm::new("n", 4)),
            Layer::act(ActKind::LeakyRelu),
            Layer::Residual(ResidualBlock::new("r", 4, &mut r)),
            Layer::ConvTranspose(ConvTranspose2d::new("t", 4, 1, 4, 2, 1, &mut r)),
            Layer::act(ActKind::Tanh),
        ]);
        let x = Tensor4::from_vec([2, 2, 4, 4], (0..64).map(|v| (v as Float * 0.37).sin()).collect()).unwrap();
        let y = net.forward(&x).unwrap();
        net.backward(&Tensor4::zeros(y.shape())).unwrap();
        net.visit_params(&mut |p| assert!(p.grad.iter().all(|&g| g == 0.0), "{}", p.name));
    }

    #[test]
    fn backward_without_forward_is_a_state_error() {
        let mut conv = Conv2d::new("c", 1, 1, 3, 1, 1, &mut rng());
        let err = conv.backward(&Tensor4::zeros([1, 1, 4, 4])).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn channel_mismatch_names_the_layer() {
        let conv = Conv2d::new("enc.0", 3, 8, 3, 1, 1, &mut rng());
        match conv.infer(&Tensor4::zeros([1, 4, 8, 8])) {
            Err(Error::Size(msg)) => assert!(msg.contains("enc.0")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn instance_norm_standardizes() {
        let norm = InstanceNorm::new("n", 3);
        let mut r = rng();
        let x = Tensor4::from_vec(
            [2, 3, 8, 8],
            (0..384).map(|_| r.sample::<f64, _>(StandardNormal) as Float * 3.0 + 1.5).collect(),
        )
        .unwrap();
        let (xhat, _) = norm.normalize(&x).unwrap();
        for p in 0..6 {
            let s = &xhat.data[p * 64..(p + 1) * 64];
            let mean = s.iter().map(|&v| v as f64).sum::<f64>() / 64.0;
            let var = s.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() <= 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "var {var}");
        }
    }

    #[test]
    fn transposed_conv_doubles() {
        let t = ConvTranspose2d::new("t", 3, 2, 4, 2, 1, &mut rng());
        assert_eq!(t.infer(&Tensor4::zeros([1, 3, 8, 8])).unwrap().shape(), [1, 2, 16, 16]);
    }

    #[test]
    fn shared_layer_tape_is_lifo() {
        let mut conv = Conv2d::new("c", 1, 1, 3, 1, 1, &mut rng());
        let a = Tensor4::filled([1, 1, 4, 4], 1.0);
        let b = Tensor4::filled([1, 1, 8, 8], 2.0);
        conv.forward(&a).unwrap();
        conv.forward(&b).unwrap();
        assert_eq!(conv.backward(&Tensor4::zeros([1, 1, 8, 8])).unwrap().shape(), [1, 1, 8, 8]);
        assert_eq!(conv.backward(&Tensor4::zeros([1, 1, 4, 4])).unwrap().shape(), [1, 1, 4, 4]);
    }
}
