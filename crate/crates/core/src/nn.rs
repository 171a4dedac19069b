//! Minimal convolutional building blocks with hand-written backward passes.
//!
//! Everything runs in `f64` on a single thread so that training is
//! bit-reproducible for a fixed seed and finite-difference gradient checks
//! are meaningful. Activations are channel-first `C × H × W`.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, Axis, Ix1, Ix2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Named parameter tensors of one network, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub names: Vec<String>,
    pub values: Vec<ArrayD<f64>>,
}

impl Params {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| ArrayD::zeros(v.raw_dim()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn matrix(&self, idx: usize) -> ArrayView2<'_, f64> {
        self.values[idx]
            .view()
            .into_dimensionality::<Ix2>()
            .expect("parameter is 2-D")
    }

    pub fn vector(&self, idx: usize) -> ndarray::ArrayView1<'_, f64> {
        self.values[idx]
            .view()
            .into_dimensionality::<Ix1>()
            .expect("parameter is 1-D")
    }

    pub fn add_matrix(&mut self, idx: usize, g: &Array2<f64>) {
        let mut dst = self.values[idx]
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("parameter is 2-D");
        dst += g;
    }

    pub fn add_vector(&mut self, idx: usize, g: &Array1<f64>) {
        let mut dst = self.values[idx]
            .view_mut()
            .into_dimensionality::<Ix1>()
            .expect("parameter is 1-D");
        dst += g;
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x * factor);
        }
    }

    /// Flat (tensor index, element index) addressing for gradient checks.
    pub fn flat_get(&self, tensor: usize, elem: usize) -> f64 {
        self.values[tensor].as_slice().expect("standard layout")[elem]
    }

    pub fn flat_set(&mut self, tensor: usize, elem: usize, value: f64) {
        self.values[tensor].as_slice_mut().expect("standard layout")[elem] = value;
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

impl Default for Params {
    fn default() -> Self {
        Self::new()
    }
}

/// He-normal initializer driven by a seeded ChaCha stream.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn he(&mut self, rows: usize, fan_in: usize) -> ArrayD<f64> {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let data: Vec<f64> = (0..rows * fan_in)
            .map(|_| normal.sample(&mut self.rng))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&[rows, fan_in]), data).expect("shape matches")
    }
}

/// 3×3 (or 1×1) convolution with "same" zero padding and a configurable stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

pub struct ConvCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize),
}

impl Conv2d {
    pub fn register(
        params: &mut Params,
        init: &mut Initializer,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let weight = params.push(
            format!("{name}.weight"),
            init.he(out_ch, in_ch * kernel * kernel),
        );
        let bias = params.push(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_ch])));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        (
            (h + 2 * pad - self.kernel) / self.stride + 1,
            (w + 2 * pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, params: &Params, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channel mismatch");
        let (ho, wo) = self.out_size(h, w);
        let cols = im2col(x, self.kernel, self.stride, ho, wo);
        let mut y = params.matrix(self.weight).dot(&cols);
        let bias = params.vector(self.bias);
        for (mut row, b) in y.axis_iter_mut(Axis(0)).zip(bias.iter()) {
            row += *b;
        }
        let y = y
            .into_shape_with_order((self.out_ch, ho, wo))
            .expect("conv output shape");
        (
            y,
            ConvCache {
                cols,
                in_dim: (c, h, w),
            },
        )
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        params: &Params,
        cache: &ConvCache,
        grad_out: &Array3<f64>,
        grads: &mut Params,
        need_input_grad: bool,
    ) -> Option<Array3<f64>> {
        let (_, ho, wo) = grad_out.dim();
        let g = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_ch, ho * wo))
            .expect("grad shape");
        grads.add_matrix(self.weight, &g.dot(&cache.cols.t()));
        grads.add_vector(self.bias, &g.sum_axis(Axis(1)));
        if !need_input_grad {
            return None;
        }
        let dcols = params.matrix(self.weight).t().dot(&g);
        Some(col2im(&dcols, cache.in_dim, self.kernel, self.stride, ho, wo))
    }
}

fn im2col(x: &Array3<f64>, k: usize, stride: usize, ho: usize, wo: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let pad = (k / 2) as isize;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::zeros((c * k * k, ho * wo));
    let out = cols.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let base = ((ch * k + ky) * k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = (ch * h + iy as usize) * w;
                    let dst_row = base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            out[dst_row + ox] = xs[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f64>,
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let pad = (k / 2) as isize;
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let mut x = Array3::zeros((c, h, w));
    let xs = x.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let base = ((ch * k + ky) * k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (ch * h + iy as usize) * w;
                    let src_row = base + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            xs[dst_row + ix as usize] += cs[src_row + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Fully connected layer on a flat feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn register(
        params: &mut Params,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let mut w = init.he(out_dim, in_dim);
        // Xavier-ish scale for heads that feed a sigmoid.
        w.mapv_inplace(|v| v / 2f64.sqrt());
        let weight = params.push(format!("{name}.weight"), w);
        let bias = params.push(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, params: &Params, x: &Array1<f64>) -> Array1<f64> {
        params.matrix(self.weight).dot(x) + params.vector(self.bias)
    }

    pub fn backward(
        &self,
        params: &Params,
        x: &Array1<f64>,
        grad_out: &Array1<f64>,
        grads: &mut Params,
    ) -> Array1<f64> {
        let gw = grad_out
            .view()
            .insert_axis(Axis(1))
            .dot(&x.view().insert_axis(Axis(0)));
        grads.add_matrix(self.weight, &gw);
        grads.add_vector(self.bias, grad_out);
        params.matrix(self.weight).t().dot(grad_out)
    }
}

pub fn relu(x: Array3<f64>) -> Array3<f64> {
    x.mapv_into(|v| v.max(0.0))
}

/// Gradient of ReLU given the ReLU *output*.
pub fn relu_backward(out: &Array3<f64>, grad: Array3<f64>) -> Array3<f64> {
    let mut grad = grad;
    grad.zip_mut_with(out, |g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
    grad
}

pub fn global_avg_pool(x: &Array3<f64>) -> Array1<f64> {
    let (_, h, w) = x.dim();
    x.sum_axis(Axis(2)).sum_axis(Axis(1)) / (h * w) as f64
}

pub fn global_avg_pool_backward(grad: &Array1<f64>, dim: (usize, usize, usize)) -> Array3<f64> {
    let (c, h, w) = dim;
    let n = (h * w) as f64;
    Array3::from_shape_fn((c, h, w), |(ch, _, _)| grad[ch] / n)
}

pub fn upsample2x(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ch, i, j)| x[[ch, i / 2, j / 2]])
}

pub fn upsample2x_backward(grad: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = grad.dim();
    let mut out = Array3::zeros((c, h2 / 2, w2 / 2));
    for ((ch, i, j), g) in grad.indexed_iter() {
        out[[ch, i / 2, j / 2]] += g;
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit, returning `(loss, dloss/dlogit)`.
pub fn bce_with_logit(logit: f64, target: f64) -> (f64, f64) {
    let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
    (softplus - target * logit, sigmoid(logit) - target)
}

/// Adam with either L2-coupled (`Adam`) or decoupled (`AdamW`) weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
    step: i32,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(params: &Params, lr: f64, weight_decay: f64, decoupled: bool) -> Self {
        let zeros = params.zeros_like().values;
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            decoupled,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Updates every tensor whose `trainable` flag is set (all when `None`).
    pub fn step(&mut self, params: &mut Params, grads: &Params, trainable: Option<&[bool]>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for i in 0..params.len() {
            if trainable.is_some_and(|t| !t[i]) {
                continue;
            }
            let p = params.values[i].as_slice_mut().expect("standard layout");
            let g = grads.values[i].as_slice().expect("standard layout");
            let m = self.m[i].as_slice_mut().expect("standard layout");
            let v = self.v[i].as_slice_mut().expect("standard layout");
            for k in 0..p.len() {
                let mut gk = g[k];
                if !self.decoupled {
                    gk += self.weight_decay * p[k];
                } else {
                    p[k] -= self.lr * self.weight_decay * p[k];
                }
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
