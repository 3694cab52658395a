//! Minimal CPU layers with explicit forward/backward passes.
//!
//! Every layer caches what its backward pass needs during a training-mode
//! forward and accumulates parameter gradients into [`Param::grad`].
//! Tensors are row-major `f32`; feature maps are `[N, C, H, W]` and part
//! features are `[N, P, D]`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, Array4, ArrayD, ArrayView2, ArrayViewMut2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Projection,
    Predictor,
    Head,
    Classifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor with its gradient and momentum buffer.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    pub velocity: ArrayD<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, group: ParamGroup, value: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        let velocity = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            group,
            value,
            grad,
            velocity,
            trainable: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Non-trainable state saved with the model (batch-norm running statistics).
#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub value: ArrayD<f32>,
}

/// Visitor over a module's parameters and buffers, in a fixed order.
pub trait Module {
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param));
    fn visit_buffers<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Buffer));
}

pub fn params_of(m: &mut dyn Module) -> Vec<&mut Param> {
    let mut out = Vec::new();
    m.visit_params(&mut |p| out.push(p));
    out
}

fn normal_init<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> ArrayD<f32> {
    let dist = Normal::new(0.0f32, std).expect("finite std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

#[inline]
fn mat(data: &[f32], rows: usize, cols: usize) -> ArrayView2<'_, f32> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view")
}

#[inline]
fn mat_mut(data: &mut [f32], rows: usize, cols: usize) -> ArrayViewMut2<'_, f32> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix view")
}

/// Output columns `[lo, hi)` whose input column `ox*s + kj - p` lies inside `[0, w)`.
fn valid_range(kj: usize, p: isize, s: usize, w: usize, wo: usize) -> (usize, usize) {
    let off = kj as isize - p;
    let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(s) };
    let last = w as isize - 1 - off;
    let hi = if last < 0 { 0 } else { (last as usize / s + 1).min(wo) };
    (lo.min(hi), hi)
}

const CONV_CHUNK_FLOATS: usize = 1 << 20;

/// 2-D convolution without bias, square kernel, symmetric zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<Array4<f32>>,
}

impl Conv2d {
    /// Weights drawn from N(0, 2 / fan_out).
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        group: ParamGroup,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_out = (out_ch * kernel * kernel) as f32;
        let w = normal_init(&[out_ch, in_ch, kernel, kernel], (2.0 / fan_out).sqrt(), rng);
        Self {
            weight: Param::new(format!("{name}.weight"), group, w),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Writes the patches of one sample into columns `[offset, offset + ho*wo)`
    /// of a `[kdim, stride]` row-major matrix.
    #[allow(clippy::too_many_arguments)]
    fn im2col(&self, x: &[f32], h: usize, w: usize, ho: usize, wo: usize, cols: &mut [f32], stride: usize, offset: usize) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        for ci in 0..self.in_ch {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * stride + offset..row * stride + offset + ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * s + ki) as isize - p;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        let (lo, hi) = valid_range(kj, p, s, w, wo);
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        if lo == hi {
                            continue;
                        }
                        let first = lo * s + kj - p as usize;
                        if s == 1 {
                            line[lo..hi].copy_from_slice(&srow[first..first + hi - lo]);
                        } else {
                            for (v, &x) in line[lo..hi].iter_mut().zip(srow[first..].iter().step_by(s)) {
                                *v = x;
                            }
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn col2im(&self, cols: &[f32], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [f32], stride: usize, offset: usize) {
        let (k, s, p) = (self.kernel, self.stride, self.pad as isize);
        for ci in 0..self.in_ch {
            let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &cols[row * stride + offset..row * stride + offset + ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * s + ki) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let srow = &src[oy * wo..(oy + 1) * wo];
                        let (lo, hi) = valid_range(kj, p, s, w, wo);
                        if lo == hi {
                            continue;
                        }
                        let first = lo * s + kj - p as usize;
                        if s == 1 {
                            for (d, &v) in drow[first..first + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                                *d += v;
                            }
                        } else {
                            for (d, &v) in drow[first..].iter_mut().step_by(s).zip(&srow[lo..hi]) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Samples processed per matrix product, sized to keep the patch
    /// matrix around a few megabytes.
    fn chunk_len(&self, n: usize, plane: usize) -> usize {
        let kdim = self.in_ch * self.kernel * self.kernel;
        (CONV_CHUNK_FLOATS / (kdim * plane).max(1)).clamp(1, n.max(1))
    }

    pub fn forward(&mut self, x: &Array4<f32>, mode: Mode) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let (ho, wo) = self.output_hw(h, w);
        let plane = ho * wo;
        let kdim = self.in_ch * self.kernel * self.kernel;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("contiguous");
        let wt = self.weight.value.as_slice().expect("contiguous");
        let mut out = Array4::<f32>::zeros((n, self.out_ch, ho, wo));
        let os = out.as_slice_mut().expect("contiguous");
        let chunk = self.chunk_len(n, plane);
        let mut cols = vec![0.0f32; kdim * chunk * plane];
        let mut y = vec![0.0f32; self.out_ch * chunk * plane];
        for start in (0..n).step_by(chunk) {
            let m = chunk.min(n - start);
            let width = m * plane;
            for j in 0..m {
                let i = start + j;
                self.im2col(&xs[i * c * h * w..(i + 1) * c * h * w], h, w, ho, wo, &mut cols, width, j * plane);
            }
            general_mat_mul(
                1.0,
                &mat(wt, self.out_ch, kdim),
                &mat(&cols[..kdim * width], kdim, width),
                0.0,
                &mut mat_mut(&mut y[..self.out_ch * width], self.out_ch, width),
            );
            for j in 0..m {
                let base = (start + j) * self.out_ch * plane;
                for o in 0..self.out_ch {
                    os[base + o * plane..base + (o + 1) * plane]
                        .copy_from_slice(&y[o * width + j * plane..o * width + (j + 1) * plane]);
                }
            }
        }
        self.cache = (mode == Mode::Train).then(|| x.into_owned());
        out
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let x = self.cache.take().expect("conv backward without training forward");
        let (n, c, h, w) = x.dim();
        let (_, _, ho, wo) = dy.dim();
        let plane = ho * wo;
        let kdim = self.in_ch * self.kernel * self.kernel;
        let xs = x.as_slice().expect("contiguous");
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().expect("contiguous");
        let wt = self.weight.value.as_slice().expect("contiguous");
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        let dxs = dx.as_slice_mut().expect("contiguous");
        let chunk = self.chunk_len(n, plane);
        let mut cols = vec![0.0f32; kdim * chunk * plane];
        let mut g = vec![0.0f32; self.out_ch * chunk * plane];
        let track = self.weight.trainable;
        for start in (0..n).step_by(chunk) {
            let m = chunk.min(n - start);
            let width = m * plane;
            for j in 0..m {
                let base = (start + j) * self.out_ch * plane;
                for o in 0..self.out_ch {
                    g[o * width + j * plane..o * width + (j + 1) * plane]
                        .copy_from_slice(&dys[base + o * plane..base + (o + 1) * plane]);
                }
            }
            let gm = mat(&g[..self.out_ch * width], self.out_ch, width);
            if track {
                for j in 0..m {
                    let i = start + j;
                    self.im2col(&xs[i * c * h * w..(i + 1) * c * h * w], h, w, ho, wo, &mut cols, width, j * plane);
                }
                let gw = self.weight.grad.as_slice_mut().expect("contiguous");
                general_mat_mul(
                    1.0,
                    &gm,
                    &mat(&cols[..kdim * width], kdim, width).t(),
                    1.0,
                    &mut mat_mut(gw, self.out_ch, kdim),
                );
            }
            general_mat_mul(
                1.0,
                &mat(wt, self.out_ch, kdim).t(),
                &gm,
                0.0,
                &mut mat_mut(&mut cols[..kdim * width], kdim, width),
            );
            for j in 0..m {
                let i = start + j;
                self.col2im(&cols, h, w, ho, wo, &mut dxs[i * c * h * w..(i + 1) * c * h * w], width, j * plane);
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        f(&mut self.weight);
    }
    fn visit_buffers<'a>(&'a mut self, _f: &mut dyn FnMut(&'a mut Buffer)) {}
}

struct BnCache {
    x_hat: Vec<f32>,
    inv_std: Vec<f32>,
    batch_stats: bool,
}

/// Batch normalization over a tensor laid out as `[N, C, S]`: statistics
/// are taken per channel over the batch and the trailing spatial extent.
/// Feature maps use `S = H·W`; part features use `C = P·D`, `S = 1`, which
/// normalizes every part channel independently.
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    pub momentum: f32,
    pub eps: f32,
    /// Uses running statistics in every mode and takes no updates.
    pub frozen: bool,
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub fn new(name: &str, group: ParamGroup, channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(format!("{name}.gamma"), group, ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::new(format!("{name}.beta"), group, ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: ArrayD::zeros(IxDyn(&[channels])),
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: ArrayD::ones(IxDyn(&[channels])),
            },
            momentum: 0.1,
            eps: 1e-5,
            frozen: false,
            cache: None,
        }
    }

    pub fn freeze(&mut self, frozen: bool) {
        self.frozen = frozen;
        self.gamma.trainable = !frozen;
        self.beta.trainable = !frozen;
    }

    /// Normalizes `data` in place. `data.len() == n * channels * spatial`.
    pub fn forward_slice(&mut self, data: &mut [f32], n: usize, spatial: usize, mode: Mode) {
        let c = self.channels;
        debug_assert_eq!(data.len(), n * c * spatial);
        let batch_stats = mode == Mode::Train && !self.frozen;
        let gamma = self.gamma.value.as_slice().expect("contiguous").to_vec();
        let beta = self.beta.value.as_slice().expect("contiguous").to_vec();
        let (mean, inv_std) = if batch_stats {
            let count = (n * spatial) as f64;
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for i in 0..n {
                for (ch, m) in mean.iter_mut().enumerate() {
                    let base = (i * c + ch) * spatial;
                    *m += lane_sum(&data[base..base + spatial], |v| v);
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * spatial;
                    let m = mean[ch] as f32;
                    var[ch] += lane_sum(&data[base..base + spatial], |v| (v - m) * (v - m));
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            let rm = self.running_mean.value.as_slice_mut().expect("contiguous");
            let rv = self.running_var.value.as_slice_mut().expect("contiguous");
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for ch in 0..c {
                rm[ch] = (1.0 - self.momentum) * rm[ch] + self.momentum * mean[ch] as f32;
                rv[ch] = (1.0 - self.momentum) * rv[ch] + self.momentum * (var[ch] * unbias) as f32;
            }
            let inv: Vec<f32> = var.iter().map(|&v| (1.0 / (v + self.eps as f64).sqrt()) as f32).collect();
            (mean.into_iter().map(|m| m as f32).collect::<Vec<_>>(), inv)
        } else {
            let rm = self.running_mean.value.as_slice().expect("contiguous").to_vec();
            let rv = self.running_var.value.as_slice().expect("contiguous");
            let inv = rv.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
            (rm, inv)
        };
        let mut x_hat = if mode == Mode::Train { vec![0.0f32; data.len()] } else { Vec::new() };
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                let (m, s, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
                let row = &mut data[base..base + spatial];
                if mode == Mode::Train {
                    for (v, xh) in row.iter_mut().zip(&mut x_hat[base..base + spatial]) {
                        *xh = (*v - m) * s;
                        *v = g * *xh + b;
                    }
                } else {
                    for v in row {
                        *v = g * ((*v - m) * s) + b;
                    }
                }
            }
        }
        self.cache = (mode == Mode::Train).then_some(BnCache {
            x_hat,
            inv_std,
            batch_stats,
        });
    }

    /// Replaces `grad` (w.r.t. the output) with the gradient w.r.t. the input.
    pub fn backward_slice(&mut self, grad: &mut [f32], n: usize, spatial: usize) {
        let cache = self.cache.take().expect("batch norm backward without training forward");
        let c = self.channels;
        let gamma = self.gamma.value.as_slice().expect("contiguous").to_vec();
        let mut sum_g = vec![0.0f64; c];
        let mut sum_gx = vec![0.0f64; c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                let g = &grad[base..base + spatial];
                sum_g[ch] += lane_sum(g, |v| v);
                sum_gx[ch] += lane_dot(g, &cache.x_hat[base..base + spatial]);
            }
        }
        if self.gamma.trainable {
            let gg = self.gamma.grad.as_slice_mut().expect("contiguous");
            let gb = self.beta.grad.as_slice_mut().expect("contiguous");
            for ch in 0..c {
                gg[ch] += sum_gx[ch] as f32;
                gb[ch] += sum_g[ch] as f32;
            }
        }
        let count = (n * spatial) as f64;
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                let scale = gamma[ch] * cache.inv_std[ch];
                if cache.batch_stats {
                    let mg = (sum_g[ch] / count) as f32;
                    let mgx = (sum_gx[ch] / count) as f32;
                    for (g, &xh) in grad[base..base + spatial].iter_mut().zip(&cache.x_hat[base..base + spatial]) {
                        *g = scale * (*g - mg - xh * mgx);
                    }
                } else {
                    for g in &mut grad[base..base + spatial] {
                        *g *= scale;
                    }
                }
            }
        }
    }

    pub fn forward4(&mut self, mut x: Array4<f32>, mode: Mode) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        self.forward_slice(x.as_slice_mut().expect("contiguous"), n, h * w, mode);
        x
    }

    pub fn backward4(&mut self, mut g: Array4<f32>) -> Array4<f32> {
        let (n, _, h, w) = g.dim();
        self.backward_slice(g.as_slice_mut().expect("contiguous"), n, h * w);
        g
    }
}

impl Module for BatchNorm {
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
    fn visit_buffers<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Buffer)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Sum of `f(v)` with eight f32 partial accumulators, returned as f64.
fn lane_sum(data: &[f32], f: impl Fn(f32) -> f32) -> f64 {
    let mut acc = [0.0f32; 8];
    let chunks = data.chunks_exact(8);
    let tail: f64 = chunks.remainder().iter().map(|&v| f(v) as f64).sum();
    for c in chunks {
        for k in 0..8 {
            acc[k] += f(c[k]);
        }
    }
    acc.iter().map(|&a| a as f64).sum::<f64>() + tail
}

fn lane_dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| (x * y) as f64).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().map(|&a| a as f64).sum::<f64>() + tail
}

/// In-place ReLU; returns the activation mask for the backward pass.
pub fn relu_inplace(data: &mut [f32]) -> Vec<bool> {
    data.iter_mut()
        .map(|v| {
            let on = *v > 0.0;
            if !on {
                *v = 0.0;
            }
            on
        })
        .collect()
}

pub fn relu_backward(grad: &mut [f32], mask: &[bool]) {
    for (g, &m) in grad.iter_mut().zip(mask) {
        if !m {
            *g = 0.0;
        }
    }
}

/// Independent fully-connected layer per part: `[N, P, in] → [N, P, out]`.
pub struct SeparateFc {
    pub parts: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[P, in, out]`
    pub weight: Param,
    /// `[P, out]`, absent for the normalized metric head.
    pub bias: Option<Param>,
    cache: Option<Array3<f32>>,
}

impl SeparateFc {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        group: ParamGroup,
        parts: usize,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = normal_init(&[parts, in_dim, out_dim], (1.0 / in_dim as f32).sqrt(), rng);
        Self {
            parts,
            in_dim,
            out_dim,
            weight: Param::new(format!("{name}.weight"), group, w),
            bias: bias.then(|| Param::new(format!("{name}.bias"), group, ArrayD::zeros(IxDyn(&[parts, out_dim])))),
            cache: None,
        }
    }

    fn weight_slice(&self, p: usize) -> &[f32] {
        let per = self.in_dim * self.out_dim;
        &self.weight.value.as_slice().expect("contiguous")[p * per..(p + 1) * per]
    }

    pub fn forward(&mut self, x: &Array3<f32>, mode: Mode) -> Array3<f32> {
        let (n, parts, din) = x.dim();
        assert_eq!((parts, din), (self.parts, self.in_dim), "separate fc input shape");
        let mut out = Array3::<f32>::zeros((n, parts, self.out_dim));
        for p in 0..parts {
            let xp = x.index_axis(ndarray::Axis(1), p);
            let w = mat(self.weight_slice(p), self.in_dim, self.out_dim);
            let mut yp = out.index_axis_mut(ndarray::Axis(1), p);
            general_mat_mul(1.0, &xp, &w, 0.0, &mut yp);
            if let Some(b) = &self.bias {
                let bs = &b.value.as_slice().expect("contiguous")[p * self.out_dim..(p + 1) * self.out_dim];
                for mut row in yp.rows_mut() {
                    row.iter_mut().zip(bs).for_each(|(y, b)| *y += b);
                }
            }
        }
        self.cache = (mode == Mode::Train).then(|| x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Array3<f32>) -> Array3<f32> {
        let x = self.cache.take().expect("fc backward without training forward");
        let (n, parts, _) = x.dim();
        let mut dx = Array3::<f32>::zeros((n, parts, self.in_dim));
        let per = self.in_dim * self.out_dim;
        for p in 0..parts {
            let gp = dy.index_axis(ndarray::Axis(1), p);
            let xp = x.index_axis(ndarray::Axis(1), p);
            if self.weight.trainable {
                let gw = &mut self.weight.grad.as_slice_mut().expect("contiguous")[p * per..(p + 1) * per];
                general_mat_mul(1.0, &xp.t(), &gp, 1.0, &mut mat_mut(gw, self.in_dim, self.out_dim));
            }
            if let Some(b) = &mut self.bias {
                if b.trainable {
                    let gb = &mut b.grad.as_slice_mut().expect("contiguous")[p * self.out_dim..(p + 1) * self.out_dim];
                    for row in gp.rows() {
                        gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                }
            }
            let w = mat(self.weight_slice(p), self.in_dim, self.out_dim);
            let mut dxp = dx.index_axis_mut(ndarray::Axis(1), p);
            general_mat_mul(1.0, &gp, &w.t(), 0.0, &mut dxp);
        }
        dx
    }
}

impl Module for SeparateFc {
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
    fn visit_buffers<'a>(&'a mut self, _f: &mut dyn FnMut(&'a mut Buffer)) {}
}

/// Two per-part FC layers with batch norm and ReLU after the first one.
/// Used both as the encoder's projection head and as the predictor.
pub struct PartMlp {
    pub fc0: SeparateFc,
    pub bn0: BatchNorm,
    pub fc1: SeparateFc,
    relu_mask: Option<Vec<bool>>,
}

impl PartMlp {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        group: ParamGroup,
        parts: usize,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc0: SeparateFc::new(&format!("{name}.fc0"), group, parts, in_dim, hidden, true, rng),
            bn0: BatchNorm::new(&format!("{name}.bn0"), group, parts * hidden),
            fc1: SeparateFc::new(&format!("{name}.fc1"), group, parts, hidden, out_dim, true, rng),
            relu_mask: None,
        }
    }

    pub fn forward(&mut self, x: &Array3<f32>, mode: Mode) -> Array3<f32> {
        let mut h = self.fc0.forward(x, mode);
        let n = h.dim().0;
        let hs = h.as_slice_mut().expect("contiguous");
        self.bn0.forward_slice(hs, n, 1, mode);
        let mask = relu_inplace(hs);
        self.relu_mask = (mode == Mode::Train).then_some(mask);
        self.fc1.forward(&h, mode)
    }

    pub fn backward(&mut self, dy: &Array3<f32>) -> Array3<f32> {
        let mut g = self.fc1.backward(dy);
        let n = g.dim().0;
        let gs = g.as_slice_mut().expect("contiguous");
        relu_backward(gs, &self.relu_mask.take().expect("mlp backward without forward"));
        self.bn0.backward_slice(gs, n, 1);
        self.fc0.backward(&g)
    }
}

impl Module for PartMlp {
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        self.fc0.visit_params(f);
        self.bn0.visit_params(f);
        self.fc1.visit_params(f);
    }
    fn visit_buffers<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Buffer)) {
        self.bn0.visit_buffers(f);
    }
}

/// Plain fully-connected layer `[N, in] → [N, out]` with bias.
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Option<Array2<f32>>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, group: ParamGroup, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let w = normal_init(&[in_dim, out_dim], (2.0 / in_dim as f32).sqrt(), rng);
        Self {
            in_dim,
            out_dim,
            weight: Param::new(format!("{name}.weight"), group, w),
            bias: Param::new(format!("{name}.bias"), group, ArrayD::zeros(IxDyn(&[out_dim]))),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<f32>, mode: Mode) -> Array2<f32> {
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-D weight");
        let mut y = x.dot(&w);
        let b = self.bias.value.as_slice().expect("contiguous");
        for mut row in y.rows_mut() {
            row.iter_mut().zip(b).for_each(|(v, b)| *v += b);
        }
        self.cache = (mode == Mode::Train).then(|| x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        let x = self.cache.take().expect("linear backward without forward");
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2-D weight");
        {
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("2-D weight");
            general_mat_mul(1.0, &x.t(), dy, 1.0, &mut gw);
        }
        let gb = self.bias.grad.as_slice_mut().expect("contiguous");
        for row in dy.rows() {
            gb.iter_mut().zip(row).for_each(|(a, g)| *a += g);
        }
        dy.dot(&w.t())
    }
}

impl Module for Linear {
    fn visit_params<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
    fn visit_buffers<'a>(&'a mut self, _f: &mut dyn FnMut(&'a mut Buffer)) {}
}


#[cfg(test)]
mod tests {
    use super::gradcheck::max_rel_err;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random4(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f32> {
        Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    /// Direct convolution as an independent reference.
    fn naive_conv(conv: &Conv2d, x: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = conv.output_hw(h, w);
        let wt = conv.weight.value.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut y = Array4::zeros((n, conv.out_ch, ho, wo));
        for i in 0..n {
            for o in 0..conv.out_ch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0f32;
                        for ci in 0..c {
                            for ki in 0..conv.kernel {
                                for kj in 0..conv.kernel {
                                    let iy = (oy * conv.stride + ki) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kj) as isize - conv.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += wt[[o, ci, ki, kj]] * x[[i, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        y[[i, o, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (k, s) in [(3, 1), (3, 2), (1, 2)] {
            let mut conv = Conv2d::new("c", ParamGroup::Backbone, 2, 3, k, s, &mut rng);
            let x = random4((2, 2, 7, 6), &mut rng);
            let y = conv.forward(&x, Mode::Eval);
            let expected = naive_conv(&conv, &x);
            assert!(y.iter().zip(&expected).all(|(a, b)| (a - b).abs() < 1e-5));
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::new("c", ParamGroup::Backbone, 2, 2, 3, 2, &mut rng);
        let x = random4((1, 2, 5, 4), &mut rng);
        let probe = random4((1, 2, 3, 2), &mut rng);
        let loss = |conv: &mut Conv2d, x: &Array4<f32>| -> f64 {
            conv.forward(x, Mode::Eval).iter().zip(&probe).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        conv.forward(&x, Mode::Train);
        let dx = conv.backward(&probe);
        let eps = 1e-2f32;
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= eps;
            num.push((loss(&mut conv, &xp) - loss(&mut conv, &xm)) / (2.0 * eps as f64));
            ana.push(dx.as_slice().unwrap()[idx] as f64);
        }
        for idx in 0..conv.weight.value.len() {
            let orig = conv.weight.value.as_slice().unwrap()[idx];
            conv.weight.value.as_slice_mut().unwrap()[idx] = orig + eps;
            let lp = loss(&mut conv, &x);
            conv.weight.value.as_slice_mut().unwrap()[idx] = orig - eps;
            let lm = loss(&mut conv, &x);
            conv.weight.value.as_slice_mut().unwrap()[idx] = orig;
            num.push((lp - lm) / (2.0 * eps as f64));
            ana.push(conv.weight.grad.as_slice().unwrap()[idx] as f64);
        }
        assert!(max_rel_err(&ana, &num, 1e-2) < 1e-3);
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bn = BatchNorm::new("bn", ParamGroup::Backbone, 3);
        bn.gamma.value = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.5, 1.5, -1.0]).unwrap();
        let x = random4((4, 3, 2, 2), &mut rng);
        let probe = random4((4, 3, 2, 2), &mut rng);
        let loss = |bn: &mut BatchNorm, x: &Array4<f32>| -> f64 {
            let saved = (bn.running_mean.value.clone(), bn.running_var.value.clone());
            let y = bn.forward4(x.clone(), Mode::Train);
            bn.running_mean.value = saved.0;
            bn.running_var.value = saved.1;
            bn.cache = None;
            y.iter().zip(&probe).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        bn.forward4(x.clone(), Mode::Train);
        let dx = bn.backward4(probe.clone());
        let eps = 1e-2f32;
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += eps;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[idx] -= eps;
            num.push((loss(&mut bn, &xp) - loss(&mut bn, &xm)) / (2.0 * eps as f64));
            ana.push(dx.as_slice().unwrap()[idx] as f64);
        }
        assert!(max_rel_err(&ana, &num, 1e-1) < 2e-2, "{}", max_rel_err(&ana, &num, 1e-1));
    }

    #[test]
    fn frozen_batchnorm_keeps_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm::new("bn", ParamGroup::Backbone, 2);
        bn.freeze(true);
        let before = (bn.running_mean.value.clone(), bn.running_var.value.clone());
        let x = random4((3, 2, 2, 2), &mut rng);
        let y = bn.forward4(x.clone(), Mode::Train);
        bn.backward4(y);
        assert_eq!(before.0, bn.running_mean.value);
        assert_eq!(before.1, bn.running_var.value);
        assert!(bn.gamma.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn separate_fc_keeps_parts_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut fc = SeparateFc::new("fc", ParamGroup::Projection, 4, 3, 5, true, &mut rng);
        let x = Array3::from_shape_simple_fn((2, 4, 3), || rng.random_range(-1.0f32..1.0));
        let y = fc.forward(&x, Mode::Eval);
        let mut x2 = x.clone();
        x2[[0, 2, 1]] += 1.0;
        x2[[1, 2, 0]] -= 3.0;
        let y2 = fc.forward(&x2, Mode::Eval);
        for p in 0..4 {
            let same = y.index_axis(ndarray::Axis(1), p) == y2.index_axis(ndarray::Axis(1), p);
            assert_eq!(same, p != 2);
        }
        let zero = fc.forward(&Array3::zeros((2, 4, 3)), Mode::Eval);
        assert!(zero.iter().all(|&v| v == 0.0));
    }
}
