//! Layer primitives over NHWC tensors, each with its backward rule.
//!
//! Convolutions use same-padding with zero fill, so spatial dimensions are
//! preserved for every dilation rate; pooling halves them.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::linalg::{gemm, Layout};
use crate::math;
use crate::tensor::Tensor;

/// Leak slope of [`Activation::LRelu`].
pub const LRELU_SLOPE: f64 = 0.01;
/// Saturation scale of [`Activation::Elu`].
pub const ELU_ALPHA: f64 = 1.0;
/// Variance floor for the per-channel normalization inside NReLU.
pub const NRELU_EPS: f64 = 1e-5;

/// Elementwise activation functions of the encoder design space.
///
/// `NRelu` normalizes each channel of each sample to zero mean and unit
/// variance over its spatial extent, then applies ReLU. It is the only
/// non-pointwise kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    NRelu,
    Relu,
    LRelu,
    Elu,
    Tanh,
    Sigmoid,
    #[serde(rename = "none")]
    Identity,
}

impl Activation {
    pub const ALL: [Activation; 7] = [
        Activation::NRelu,
        Activation::Relu,
        Activation::LRelu,
        Activation::Elu,
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Activation::NRelu => "nrelu",
            Activation::Relu => "relu",
            Activation::LRelu => "lrelu",
            Activation::Elu => "elu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    fn pointwise(self, x: f64) -> f64 {
        match self {
            Activation::Relu | Activation::NRelu => x.max(0.0),
            Activation::LRelu => if x > 0.0 { x } else { LRELU_SLOPE * x },
            Activation::Elu => if x > 0.0 { x } else { ELU_ALPHA * (math::exp(x) - 1.0) },
            Activation::Tanh => math::tanh(x),
            Activation::Sigmoid => math::sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through input `x` and output `y`.
    fn pointwise_grad(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu | Activation::NRelu => if x > 0.0 { 1.0 } else { 0.0 },
            Activation::LRelu => if x > 0.0 { 1.0 } else { LRELU_SLOPE },
            Activation::Elu => if x > 0.0 { 1.0 } else { y + ELU_ALPHA },
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

/// Channel layout used by [`Activation::NRelu`]: rank-4 tensors normalize
/// per (sample, channel) over H×W; rank-2 tensors per sample over features.
fn norm_groups(shape: &[usize]) -> (usize, usize, usize) {
    match *shape {
        [n, h, w, c] => (n, h * w, c),
        [n, f] => (n, f, 1),
        _ => (1, shape.iter().product(), 1),
    }
}

fn normalize_channels(x: &Tensor) -> (Tensor, Vec<f64>) {
    let (n, spatial, c) = norm_groups(x.shape());
    let mut out = x.clone();
    let mut inv_std = vec![0.0; n * c];
    let d = out.data_mut();
    for s in 0..n {
        for ch in 0..c {
            let idx = |p: usize| (s * spatial + p) * c + ch;
            let mean = (0..spatial).map(|p| d[idx(p)]).sum::<f64>() / spatial as f64;
            let var = (0..spatial).map(|p| math::sq(d[idx(p)] - mean)).sum::<f64>() / spatial as f64;
            let is = 1.0 / math::sqrt(var + NRELU_EPS);
            for p in 0..spatial {
                d[idx(p)] = (d[idx(p)] - mean) * is;
            }
            inv_std[s * c + ch] = is;
        }
    }
    (out, inv_std)
}

pub fn apply_activation(x: &Tensor, act: Activation) -> Tensor {
    match act {
        Activation::Identity => x.clone(),
        Activation::NRelu => normalize_channels(x).0.map(|v| v.max(0.0)),
        _ => x.map(|v| act.pointwise(v)),
    }
}

/// Gradient of [`apply_activation`] with respect to its input.
pub fn activation_backward(x: &Tensor, y: &Tensor, dy: &Tensor, act: Activation) -> Tensor {
    match act {
        Activation::Identity => dy.clone(),
        Activation::NRelu => {
            let (z, inv_std) = normalize_channels(x);
            // through the ReLU
            let mut dz = dy.clone();
            for (g, &zv) in dz.data_mut().iter_mut().zip(z.data()) {
                if zv <= 0.0 {
                    *g = 0.0;
                }
            }
            // through the normalization: dx = is·(dz − mean(dz) − z·mean(dz·z))
            let (n, spatial, c) = norm_groups(x.shape());
            let zd = z.data();
            let g = dz.data_mut();
            for s in 0..n {
                for ch in 0..c {
                    let idx = |p: usize| (s * spatial + p) * c + ch;
                    let m1 = (0..spatial).map(|p| g[idx(p)]).sum::<f64>() / spatial as f64;
                    let m2 = (0..spatial).map(|p| g[idx(p)] * zd[idx(p)]).sum::<f64>() / spatial as f64;
                    let is = inv_std[s * c + ch];
                    for p in 0..spatial {
                        let i = idx(p);
                        g[i] = is * (g[i] - m1 - zd[i] * m2);
                    }
                }
            }
            dz
        }
        _ => {
            let mut dx = dy.clone();
            for ((g, &xv), &yv) in dx.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                *g *= act.pointwise_grad(xv, yv);
            }
            dx
        }
    }
}

/// Geometry of a same-padded, stride-1 dilated convolution.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    rate: usize,
}

impl ConvGeom {
    fn new(input: &Tensor, kernel: &Tensor, rate: usize) -> Result<Self> {
        if rate < 1 {
            return Err(Error::Parameter(alloc::format!("dilation rate must be >= 1, got {}", rate)));
        }
        let [n, h, w, cin] = input.nhwc()?;
        let (k, kcin, cout) = match kernel.shape() {
            &[kh, kw, kc, co] if kh == kw && kh % 2 == 1 => (kh, kc, co),
            s => return Err(dim_err!("kernel must be [k, k, cin, cout] with odd k, got {:?}", s)),
        };
        if kcin != cin {
            return Err(dim_err!("input has {} channels but kernel expects {}", cin, kcin));
        }
        Ok(Self { n, h, w, cin, cout, k, rate })
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    /// Samples per GEMM chunk: enough rows to keep the GEMM efficient while
    /// bounding the im2col buffer.
    fn chunk(&self) -> usize {
        (4096 / (self.h * self.w)).clamp(1, self.n)
    }

    fn im2col(&self, x: &[f64], s0: usize, ns: usize, cols: &mut Vec<f64>) {
        let (h, w, cin, k) = (self.h as isize, self.w as isize, self.cin, self.k as isize);
        let half = (k - 1) / 2;
        let r = self.rate as isize;
        let patch = self.patch();
        cols.clear();
        cols.resize(ns * self.h * self.w * patch, 0.0);
        for s in 0..ns {
            let img = &x[(s0 + s) * self.h * self.w * cin..(s0 + s + 1) * self.h * self.w * cin];
            for y in 0..h {
                for xx in 0..w {
                    let row = ((s as isize * h + y) * w + xx) as usize * patch;
                    for ky in 0..k {
                        let iy = y + (ky - half) * r;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = xx + (kx - half) * r;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            let src = ((iy * w + ix) as usize) * cin;
                            let dst = row + ((ky * k + kx) as usize) * cin;
                            cols[dst..dst + cin].copy_from_slice(&img[src..src + cin]);
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], s0: usize, ns: usize, dx: &mut [f64]) {
        let (h, w, cin, k) = (self.h as isize, self.w as isize, self.cin, self.k as isize);
        let half = (k - 1) / 2;
        let r = self.rate as isize;
        let patch = self.patch();
        for s in 0..ns {
            let img = &mut dx[(s0 + s) * self.h * self.w * cin..(s0 + s + 1) * self.h * self.w * cin];
            for y in 0..h {
                for xx in 0..w {
                    let row = ((s as isize * h + y) * w + xx) as usize * patch;
                    for ky in 0..k {
                        let iy = y + (ky - half) * r;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = xx + (kx - half) * r;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            let dst = ((iy * w + ix) as usize) * cin;
                            let src = row + ((ky * k + kx) as usize) * cin;
                            for c in 0..cin {
                                img[dst + c] += cols[src + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded dilated convolution. `kernel` is `[k, k, cin, cout]` with odd
/// `k`; `bias`, if present, has `cout` entries.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, rate: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input, kernel, rate)?;
    if let Some(b) = bias {
        if b.len() != g.cout {
            return Err(dim_err!("bias has {} entries, kernel has {} outputs", b.len(), g.cout));
        }
    }
    let hw = g.h * g.w;
    let mut out = vec![0.0; g.n * hw * g.cout];
    let chunk = g.chunk();
    let mut cols = Vec::new();
    let mut s0 = 0;
    while s0 < g.n {
        let ns = chunk.min(g.n - s0);
        let rows = ns * hw;
        let dst = &mut out[s0 * hw * g.cout..(s0 + ns) * hw * g.cout];
        if g.k == 1 {
            let src = &input.data()[s0 * hw * g.cin..(s0 + ns) * hw * g.cin];
            gemm(rows, g.cin, g.cout, 1.0, src, Layout::Normal, kernel.data(), Layout::Normal, 0.0, dst);
        } else {
            g.im2col(input.data(), s0, ns, &mut cols);
            gemm(rows, g.patch(), g.cout, 1.0, &cols, Layout::Normal, kernel.data(), Layout::Normal, 0.0, dst);
        }
        s0 += ns;
    }
    if let Some(b) = bias {
        for px in out.chunks_mut(g.cout) {
            for (o, bb) in px.iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
    }
    Tensor::new(vec![g.n, g.h, g.w, g.cout], out)
}

/// Gradients of [`conv2d`]: `(d_input, d_kernel, d_bias)`; `d_input` is
/// skipped when `need_input_grad` is false.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    dy: &Tensor,
    rate: usize,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let g = ConvGeom::new(input, kernel, rate)?;
    let hw = g.h * g.w;
    let patch = g.patch();
    let mut dk = vec![0.0; patch * g.cout];
    let mut dx = if need_input_grad { Some(vec![0.0; input.len()]) } else { None };
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    let chunk = g.chunk();
    let mut s0 = 0;
    while s0 < g.n {
        let ns = chunk.min(g.n - s0);
        let rows = ns * hw;
        let dyc = &dy.data()[s0 * hw * g.cout..(s0 + ns) * hw * g.cout];
        if g.k == 1 {
            let src = &input.data()[s0 * hw * g.cin..(s0 + ns) * hw * g.cin];
            gemm(g.cin, rows, g.cout, 1.0, src, Layout::Transposed, dyc, Layout::Normal, 1.0, &mut dk);
            if let Some(dx) = dx.as_mut() {
                let d = &mut dx[s0 * hw * g.cin..(s0 + ns) * hw * g.cin];
                gemm(rows, g.cout, g.cin, 1.0, dyc, Layout::Normal, kernel.data(), Layout::Transposed, 0.0, d);
            }
        } else {
            g.im2col(input.data(), s0, ns, &mut cols);
            gemm(patch, rows, g.cout, 1.0, &cols, Layout::Transposed, dyc, Layout::Normal, 1.0, &mut dk);
            if let Some(dx) = dx.as_mut() {
                dcols.clear();
                dcols.resize(rows * patch, 0.0);
                gemm(rows, g.cout, patch, 1.0, dyc, Layout::Normal, kernel.data(), Layout::Transposed, 0.0, &mut dcols);
                g.col2im(&dcols, s0, ns, dx);
            }
        }
        s0 += ns;
    }
    let mut db = vec![0.0; g.cout];
    for px in dy.data().chunks(g.cout) {
        for (d, v) in db.iter_mut().zip(px) {
            *d += v;
        }
    }
    Ok((
        dx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
        Tensor::new(vec![g.cout], db)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Max,
    Mean,
}

impl Pooling {
    pub const ALL: [Pooling; 2] = [Pooling::Mean, Pooling::Max];

    pub fn name(self) -> &'static str {
        match self {
            Pooling::Max => "max",
            Pooling::Mean => "mean",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

/// 2×2, stride-2 pooling. For max pooling the flat input index of each
/// window's maximum is returned as well (first index wins ties).
pub fn pool2d(input: &Tensor, strategy: Pooling) -> Result<(Tensor, Vec<usize>)> {
    let [n, h, w, c] = input.nhwc()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err!("pooling needs even spatial dims, got {}x{}", h, w));
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * ho * wo * c);
    let mut arg = Vec::new();
    if strategy == Pooling::Max {
        arg.reserve(n * ho * wo * c);
    }
    for s in 0..n {
        for y in 0..ho {
            for xx in 0..wo {
                for ch in 0..c {
                    let idx = [
                        ((s * h + 2 * y) * w + 2 * xx) * c + ch,
                        ((s * h + 2 * y) * w + 2 * xx + 1) * c + ch,
                        ((s * h + 2 * y + 1) * w + 2 * xx) * c + ch,
                        ((s * h + 2 * y + 1) * w + 2 * xx + 1) * c + ch,
                    ];
                    match strategy {
                        Pooling::Mean => out.push(idx.iter().map(|&i| x[i]).sum::<f64>() * 0.25),
                        Pooling::Max => {
                            let mut best = idx[0];
                            for &i in &idx[1..] {
                                if x[i] > x[best] {
                                    best = i;
                                }
                            }
                            out.push(x[best]);
                            arg.push(best);
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, ho, wo, c], out)?, arg))
}

pub fn pool2d_backward(input_shape: &[usize], strategy: Pooling, argmax: &[usize], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_shape);
    let (h, w, c) = (input_shape[1], input_shape[2], input_shape[3]);
    let d = dx.data_mut();
    match strategy {
        Pooling::Max => {
            for (&i, &g) in argmax.iter().zip(dy.data()) {
                d[i] += g;
            }
        }
        Pooling::Mean => {
            let (ho, wo) = (h / 2, w / 2);
            let n = input_shape[0];
            let g = dy.data();
            for s in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        for ch in 0..c {
                            d[((s * h + y) * w + xx) * c + ch] =
                                0.25 * g[((s * ho + y / 2) * wo + xx / 2) * c + ch];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, h, w, c] = input.nhwc()?;
    if factor == 0 {
        return Err(Error::Parameter("upsampling factor must be positive".into()));
    }
    let (ho, wo) = (h * factor, w * factor);
    let x = input.data();
    let mut out = Vec::with_capacity(n * ho * wo * c);
    for s in 0..n {
        for y in 0..ho {
            for xx in 0..wo {
                let src = ((s * h + y / factor) * w + xx / factor) * c;
                out.extend_from_slice(&x[src..src + c]);
            }
        }
    }
    Tensor::new(vec![n, ho, wo, c], out)
}

pub fn upsample_nearest_backward(input_shape: &[usize], factor: usize, dy: &Tensor) -> Tensor {
    let (n, h, w, c) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (ho, wo) = (h * factor, w * factor);
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    let g = dy.data();
    for s in 0..n {
        for y in 0..ho {
            for xx in 0..wo {
                let dst = ((s * h + y / factor) * w + xx / factor) * c;
                let src = ((s * ho + y) * wo + xx) * c;
                for ch in 0..c {
                    d[dst + ch] += g[src + ch];
                }
            }
        }
    }
    dx
}

/// Concatenate NHWC tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
    let [n, h, w, _] = first.nhwc()?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let [pn, ph, pw, pc] = p.nhwc()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(dim_err!("concat mismatch: {:?} vs {:?}", p.shape(), first.shape()));
        }
        widths.push(pc);
    }
    let ctot: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(n * h * w * ctot);
    for px in 0..n * h * w {
        for (p, &c) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[px * c..(px + 1) * c]);
        }
    }
    Tensor::new(vec![n, h, w, ctot], out)
}

/// Split a channel-concatenated gradient back into per-part gradients.
pub fn split_channels(dy: &Tensor, widths: &[usize]) -> Result<Vec<Tensor>> {
    let [n, h, w, c] = dy.nhwc()?;
    if widths.iter().sum::<usize>() != c {
        return Err(dim_err!("split widths {:?} do not sum to {}", widths, c));
    }
    let mut outs: Vec<Vec<f64>> = widths.iter().map(|&wd| Vec::with_capacity(n * h * w * wd)).collect();
    for px in dy.data().chunks(c) {
        let mut off = 0;
        for (o, &wd) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&px[off..off + wd]);
            off += wd;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(d, &wd)| Tensor::new(vec![n, h, w, wd], d))
        .collect()
}

/// Fully connected layer: `[n, f] · [f, l] + b`.
pub fn dense(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, f) = match *input.shape() {
        [n, f] => (n, f),
        _ => return Err(dim_err!("dense input must be [n, features], got {:?}", input.shape())),
    };
    let l = match *weight.shape() {
        [wf, l] if wf == f => l,
        _ => return Err(dim_err!("dense weight {:?} does not accept {} features", weight.shape(), f)),
    };
    let mut out = vec![0.0; n * l];
    gemm(n, f, l, 1.0, input.data(), Layout::Normal, weight.data(), Layout::Normal, 0.0, &mut out);
    if let Some(b) = bias {
        if b.len() != l {
            return Err(dim_err!("dense bias has {} entries, expected {}", b.len(), l));
        }
        for row in out.chunks_mut(l) {
            for (o, bb) in row.iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
    }
    Tensor::new(vec![n, l], out)
}

/// Gradients of [`dense`]: `(d_input, d_weight, d_bias)`.
pub fn dense_backward(input: &Tensor, weight: &Tensor, dy: &Tensor, need_input_grad: bool) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (n, f) = (input.shape()[0], input.shape()[1]);
    let l = weight.shape()[1];
    let mut dw = vec![0.0; f * l];
    gemm(f, n, l, 1.0, input.data(), Layout::Transposed, dy.data(), Layout::Normal, 0.0, &mut dw);
    let dx = if need_input_grad {
        let mut dx = vec![0.0; n * f];
        gemm(n, l, f, 1.0, dy.data(), Layout::Normal, weight.data(), Layout::Transposed, 0.0, &mut dx);
        Some(Tensor::new(vec![n, f], dx)?)
    } else {
        None
    };
    let mut db = vec![0.0; l];
    for row in dy.data().chunks(l) {
        for (d, v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    Ok((dx, Tensor::new(vec![f, l], dw)?, Tensor::new(vec![l], db)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Direct 7-loop convolution used as the reference.
    fn conv_naive(x: &Tensor, k: &Tensor, rate: usize) -> Tensor {
        let [n, h, w, cin] = x.nhwc().unwrap();
        let (ks, cout) = (k.shape()[0], k.shape()[3]);
        let half = (ks as isize - 1) / 2;
        Tensor::from_fn(&[n, h, w, cout], |i| {
            let co = i % cout;
            let xx = (i / cout) % w;
            let y = (i / cout / w) % h;
            let s = i / cout / w / h;
            let mut acc = 0.0;
            for ky in 0..ks {
                for kx in 0..ks {
                    let iy = y as isize + (ky as isize - half) * rate as isize;
                    let ix = xx as isize + (kx as isize - half) * rate as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    for ci in 0..cin {
                        acc += x.data()[((s * h + iy as usize) * w + ix as usize) * cin + ci]
                            * k.data()[((ky * ks + kx) * cin + ci) * cout + co];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::filled(&[1, 3, 3, 1], 1.0);
        let mut k = Tensor::zeros(&[3, 3, 1, 1]);
        k.data_mut()[4] = 1.0;
        assert_eq!(conv2d(&x, &k, None, 1).unwrap(), x);
    }

    #[test]
    fn dilated_delta_spreads_on_rate_lattice() {
        let mut x = Tensor::zeros(&[1, 5, 5, 1]);
        x.data_mut()[12] = 1.0;
        let k = Tensor::filled(&[3, 3, 1, 1], 1.0);
        let y = conv2d(&x, &k, None, 2).unwrap();
        // hand-evaluated: ones at rows/cols {0, 2, 4}
        let mut expected = [0.0; 25];
        for r in [0, 2, 4] {
            for c in [0, 2, 4] {
                expected[r * 5 + c] = 1.0;
            }
        }
        assert_eq!(y.data(), &expected);
    }

    #[test]
    fn im2col_matches_naive_for_all_rates() {
        let x = Tensor::from_fn(&[2, 6, 5, 3], |i| ((i * 37) % 11) as f64 - 5.0);
        let k = Tensor::from_fn(&[3, 3, 3, 4], |i| ((i * 13) % 7) as f64 * 0.25 - 0.7);
        for rate in 1..=3 {
            let y = conv2d(&x, &k, None, rate).unwrap();
            assert_eq!(y.shape(), &[2, 6, 5, 4]);
            assert!(y.max_abs_diff(&conv_naive(&x, &k, rate)) < 1e-12);
        }
        let k1 = Tensor::from_fn(&[1, 1, 3, 2], |i| i as f64 - 2.0);
        assert!(conv2d(&x, &k1, None, 1).unwrap().max_abs_diff(&conv_naive(&x, &k1, 1)) < 1e-12);
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::zeros(&[1, 4, 4, 2]);
        let k = Tensor::zeros(&[3, 3, 1, 4]);
        assert!(matches!(conv2d(&x, &k, None, 1), Err(Error::Dimension(_))));
        let k = Tensor::zeros(&[3, 3, 2, 4]);
        assert!(matches!(conv2d(&x, &k, None, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn pooling_examples() {
        let x = t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pool2d(&x, Pooling::Max).unwrap().0.data(), &[4.0]);
        assert_eq!(pool2d(&x, Pooling::Mean).unwrap().0.data(), &[2.5]);
        let odd = Tensor::zeros(&[1, 3, 2, 1]);
        assert!(matches!(pool2d(&odd, Pooling::Max), Err(Error::Dimension(_))));
        let c = Tensor::filled(&[2, 4, 6, 3], 1.75);
        for p in Pooling::ALL {
            let (y, _) = pool2d(&c, p).unwrap();
            assert!(y.data().iter().all(|&v| v == 1.75));
            assert_eq!(upsample_nearest(&y, 2).unwrap(), c);
        }
    }

    #[test]
    fn activation_examples() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(apply_activation(&x, Activation::Relu).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(apply_activation(&x, Activation::Identity), x);
        assert_eq!(apply_activation(&t(&[1], &[0.0]), Activation::Sigmoid).data(), &[0.5]);
    }

    #[test]
    fn activations_are_monotone() {
        let xs: Vec<f64> = (-400..=400).map(|i| i as f64 * 0.025).collect();
        for act in Activation::ALL.into_iter().filter(|a| *a != Activation::NRelu) {
            let ys = apply_activation(&Tensor::new(vec![xs.len()], xs.clone()).unwrap(), act);
            assert!(ys.data().windows(2).all(|w| w[1] >= w[0]), "{:?}", act);
        }
    }

    #[test]
    fn nrelu_normalizes_each_channel() {
        let x = Tensor::from_fn(&[2, 4, 4, 3], |i| (i as f64 * 0.37).sin() * 10.0 + 3.0);
        let (z, _) = normalize_channels(&x);
        for s in 0..2 {
            for c in 0..3 {
                let v: Vec<f64> = (0..16).map(|p| z.data()[(s * 16 + p) * 3 + c]).collect();
                let mean = v.iter().sum::<f64>() / 16.0;
                let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 16.0;
                assert!(mean.abs() < 1e-12);
                assert!((var - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor::from_fn(&[2, 3, 3, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 3, 3, 3], |i| -(i as f64));
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3, 5]);
        let parts = split_channels(&c, &[2, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
