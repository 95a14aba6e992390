//! Layers with explicit forward caches.
//!
//! `forward` returns the output together with a [`Cache`]; `backward`
//! consumes that cache, accumulates parameter gradients and returns the
//! input gradient. Keeping caches outside the layer lets one module run
//! several forward passes (for example two views) before backpropagating.

use rand::Rng;
use rayon::prelude::*;

use super::kernels::{gemm, Window};
use super::param::{Module, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Samples per parallel work item. Fixed so that reductions happen in the
/// same order whatever the thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics updated.
    Train,
    /// Batch statistics; running statistics left untouched.
    Frozen,
    /// Running statistics.
    Eval,
}

#[derive(Debug, Clone)]
pub enum Cache {
    Input(Tensor),
    Norm {
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// statistics were constants of the forward pass (eval mode)
        fixed: bool,
    },
    Mask(Vec<bool>),
    Shape(Vec<usize>),
}

fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            weight: Param::new(uniform(rng, inputs * outputs, bound)),
            bias: Param::new(vec![0.0; outputs]),
        }
    }

    pub fn zeroed(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::new(vec![0.0; inputs * outputs]),
            bias: Param::new(vec![0.0; outputs]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.row_len() != self.inputs {
            return Err(Error::arg(format!(
                "linear layer expects {} inputs, got {:?}",
                self.inputs,
                x.shape()
            )));
        }
        let n = x.batch();
        let mut y = Vec::with_capacity(n * self.outputs);
        for _ in 0..n {
            y.extend_from_slice(&self.bias.value);
        }
        gemm(
            n,
            self.inputs,
            self.outputs,
            1.0,
            x.data(),
            false,
            &self.weight.value,
            true,
            1.0,
            &mut y,
        );
        Tensor::new(vec![n, self.outputs], y)
    }

    /// Accumulates weight gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let n = x.batch();
        gemm(
            self.outputs,
            n,
            self.inputs,
            1.0,
            dy.data(),
            true,
            x.data(),
            false,
            1.0,
            &mut self.weight.grad,
        );
        for row in dy.rows() {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(x.shape().to_vec());
        gemm(
            n,
            self.outputs,
            self.inputs,
            1.0,
            dy.data(),
            false,
            &self.weight.value,
            false,
            0.0,
            dx.data_mut(),
        );
        dx
    }
}

fn volume(shape: &[usize], channels: usize, what: &str) -> Result<[usize; 3]> {
    if shape.len() != 5 || shape[1] != channels {
        return Err(Error::arg(format!(
            "{what} expects (batch, {channels}, depth, height, width), got {shape:?}"
        )));
    }
    Ok([shape[2], shape[3], shape[4]])
}

/// Stride-1 volumetric convolution; 2-D convolutions use depth-1 kernels.
/// Input and output layout: `(batch, channels, depth, height, width)`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub padding: [usize; 3],
    /// `out_channels x (in_channels * kernel volume)`
    pub weight: Param,
    pub bias: Param,
}

impl Conv {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        padding: [usize; 3],
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel.iter().product::<usize>();
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            in_channels,
            out_channels,
            kernel,
            padding,
            weight: Param::new(uniform(rng, out_channels * fan_in, bound)),
            bias: Param::new(vec![0.0; out_channels]),
        }
    }

    fn window(&self, large: [usize; 3]) -> Result<Window> {
        let small = Window::positions(large, self.kernel, self.padding).ok_or_else(|| {
            Error::arg(format!(
                "kernel {:?} does not fit input {large:?}",
                self.kernel
            ))
        })?;
        Ok(Window {
            channels: self.in_channels,
            large,
            small,
            kernel: self.kernel,
            padding: self.padding,
        })
    }

    pub fn output_dims(&self, large: [usize; 3]) -> Result<[usize; 3]> {
        Ok(self.window(large)?.small)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let win = self.window(volume(x.shape(), self.in_channels, "conv")?)?;
        let (k, p, cout) = (win.rows(), win.cols(), self.out_channels);
        let (in_len, out_len) = (win.large_len(), cout * p);
        let n = x.batch();
        let mut y = vec![0.0; n * out_len];
        let w = &self.weight.value;
        let b = &self.bias.value;
        y.par_chunks_mut(CHUNK * out_len)
            .zip(x.data().par_chunks(CHUNK * in_len))
            .for_each(|(yc, xc)| {
                let mut cols = vec![0.0; k * p];
                for (ys, xs) in yc.chunks_mut(out_len).zip(xc.chunks(in_len)) {
                    win.im2col(xs, &mut cols);
                    for (o, seg) in ys.chunks_mut(p).enumerate() {
                        seg.fill(b[o]);
                    }
                    gemm(cout, k, p, 1.0, w, false, &cols, false, 1.0, ys);
                }
            });
        let [d, h, wd] = win.small;
        Tensor::new(vec![n, cout, d, h, wd], y)
    }

    fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let large = [x.shape()[2], x.shape()[3], x.shape()[4]];
        let win = self.window(large).expect("geometry validated in forward");
        let (k, p, cout) = (win.rows(), win.cols(), self.out_channels);
        let (in_len, out_len) = (win.large_len(), cout * p);
        let mut dx = Tensor::zeros(x.shape().to_vec());
        let w = &self.weight.value;
        let partials: Vec<(Vec<f64>, Vec<f64>)> = dx
            .data_mut()
            .par_chunks_mut(CHUNK * in_len)
            .zip(x.data().par_chunks(CHUNK * in_len))
            .zip(dy.data().par_chunks(CHUNK * out_len))
            .map(|((dxc, xc), dyc)| {
                let mut dw = vec![0.0; cout * k];
                let mut db = vec![0.0; cout];
                let mut cols = vec![0.0; k * p];
                for ((dxs, xs), dys) in dxc
                    .chunks_mut(in_len)
                    .zip(xc.chunks(in_len))
                    .zip(dyc.chunks(out_len))
                {
                    win.im2col(xs, &mut cols);
                    gemm(cout, p, k, 1.0, dys, false, &cols, true, 1.0, &mut dw);
                    for (o, seg) in dys.chunks(p).enumerate() {
                        db[o] += seg.iter().sum::<f64>();
                    }
                    gemm(k, cout, p, 1.0, w, true, dys, false, 0.0, &mut cols);
                    win.col2im(&cols, dxs);
                }
                (dw, db)
            })
            .collect();
        for (dw, db) in partials {
            add_into(&mut self.weight.grad, &dw);
            add_into(&mut self.bias.grad, &db);
        }
        dx
    }
}

/// Stride-1 transposed volumetric convolution (the adjoint of [`Conv`]).
#[derive(Debug, Clone)]
pub struct ConvTranspose {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub padding: [usize; 3],
    /// `in_channels x (out_channels * kernel volume)`
    pub weight: Param,
    pub bias: Param,
}

impl ConvTranspose {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        padding: [usize; 3],
        rng: &mut impl Rng,
    ) -> Self {
        let vol = kernel.iter().product::<usize>();
        let bound = 1.0 / ((in_channels * vol) as f64).sqrt();
        Self {
            in_channels,
            out_channels,
            kernel,
            padding,
            weight: Param::new(uniform(rng, in_channels * out_channels * vol, bound)),
            bias: Param::new(vec![0.0; out_channels]),
        }
    }

    fn window(&self, small: [usize; 3]) -> Result<Window> {
        let large = Window::expansion(small, self.kernel, self.padding).ok_or_else(|| {
            Error::arg(format!(
                "transposed kernel {:?} with padding {:?} collapses input {small:?}",
                self.kernel, self.padding
            ))
        })?;
        Ok(Window {
            channels: self.out_channels,
            large,
            small,
            kernel: self.kernel,
            padding: self.padding,
        })
    }

    pub fn output_dims(&self, small: [usize; 3]) -> Result<[usize; 3]> {
        Ok(self.window(small)?.large)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let win = self.window(volume(x.shape(), self.in_channels, "transposed conv")?)?;
        let (kb, p, cin) = (win.rows(), win.cols(), self.in_channels);
        let (in_len, out_len) = (cin * p, win.large_len());
        let large_vol = out_len / self.out_channels;
        let n = x.batch();
        let mut y = vec![0.0; n * out_len];
        let w = &self.weight.value;
        let b = &self.bias.value;
        y.par_chunks_mut(CHUNK * out_len)
            .zip(x.data().par_chunks(CHUNK * in_len))
            .for_each(|(yc, xc)| {
                let mut cols = vec![0.0; kb * p];
                for (ys, xs) in yc.chunks_mut(out_len).zip(xc.chunks(in_len)) {
                    gemm(kb, cin, p, 1.0, w, true, xs, false, 0.0, &mut cols);
                    for (o, seg) in ys.chunks_mut(large_vol).enumerate() {
                        seg.fill(b[o]);
                    }
                    win.col2im(&cols, ys);
                }
            });
        let [d, h, wd] = win.large;
        Tensor::new(vec![n, self.out_channels, d, h, wd], y)
    }

    fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let small = [x.shape()[2], x.shape()[3], x.shape()[4]];
        let win = self.window(small).expect("geometry validated in forward");
        let (kb, p, cin, cout) = (win.rows(), win.cols(), self.in_channels, self.out_channels);
        let (in_len, out_len) = (cin * p, win.large_len());
        let large_vol = out_len / cout;
        let mut dx = Tensor::zeros(x.shape().to_vec());
        let w = &self.weight.value;
        let partials: Vec<(Vec<f64>, Vec<f64>)> = dx
            .data_mut()
            .par_chunks_mut(CHUNK * in_len)
            .zip(x.data().par_chunks(CHUNK * in_len))
            .zip(dy.data().par_chunks(CHUNK * out_len))
            .map(|((dxc, xc), dyc)| {
                let mut dw = vec![0.0; cin * kb];
                let mut db = vec![0.0; cout];
                let mut cols = vec![0.0; kb * p];
                for ((dxs, xs), dys) in dxc
                    .chunks_mut(in_len)
                    .zip(xc.chunks(in_len))
                    .zip(dyc.chunks(out_len))
                {
                    win.im2col(dys, &mut cols);
                    gemm(cin, kb, p, 1.0, w, false, &cols, false, 0.0, dxs);
                    gemm(cin, p, kb, 1.0, xs, false, &cols, true, 1.0, &mut dw);
                    for (o, seg) in dys.chunks(large_vol).enumerate() {
                        db[o] += seg.iter().sum::<f64>();
                    }
                }
                (dw, db)
            })
            .collect();
        for (dw, db) in partials {
            add_into(&mut self.weight.grad, &dw);
            add_into(&mut self.bias.grad, &db);
        }
        dx
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

type Stats = (Vec<f64>, Vec<f64>);

/// Batch normalization over axis 1; statistics pool the batch and every
/// trailing axis.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: Param::buffer(vec![0.0; channels]),
            running_var: Param::buffer(vec![1.0; channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Normalizes `x`; in train mode also returns the batch statistics
    /// (mean, unbiased variance) to fold into the running estimates.
    fn forward(&self, mut x: Tensor, mode: Mode) -> Result<(Tensor, Cache, Option<Stats>)> {
        let shape = x.shape().to_vec();
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(Error::arg(format!(
                "batch norm over {} channels got {shape:?}",
                self.channels
            )));
        }
        let c = self.channels;
        let inner: usize = shape[2..].iter().product();
        let count = (shape[0] * inner) as f64;
        let mut update = None;
        let (mean, var) = if mode == Mode::Eval {
            (
                self.running_mean.value.clone(),
                self.running_var.value.clone(),
            )
        } else {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for (i, v) in x.data().iter().enumerate() {
                mean[(i / inner) % c] += v;
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for (i, v) in x.data().iter().enumerate() {
                let d = v - mean[(i / inner) % c];
                var[(i / inner) % c] += d * d;
            }
            var.iter_mut().for_each(|s| *s /= count);
            if mode == Mode::Train {
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let unbiased = var.iter().map(|v| v * unbias).collect();
                update = Some((mean.clone(), unbiased));
            }
            (mean, var)
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            let ch = (i / inner) % c;
            let h = (*v - mean[ch]) * inv_std[ch];
            xhat[i] = h;
            *v = self.gamma.value[ch] * h + self.beta.value[ch];
        }
        let fixed = mode == Mode::Eval;
        let cache = Cache::Norm {
            xhat,
            inv_std,
            fixed,
        };
        Ok((x, cache, update))
    }

    fn absorb(&mut self, (mean, var): Stats) {
        let m = self.momentum;
        for (rm, v) in self.running_mean.value.iter_mut().zip(mean) {
            *rm = (1.0 - m) * *rm + m * v;
        }
        for (rv, v) in self.running_var.value.iter_mut().zip(var) {
            *rv = (1.0 - m) * *rv + m * v;
        }
    }

    fn backward(&mut self, xhat: &[f64], inv_std: &[f64], fixed: bool, mut dy: Tensor) -> Tensor {
        let shape = dy.shape().to_vec();
        let c = self.channels;
        let inner: usize = shape[2..].iter().product();
        let count = (shape[0] * inner) as f64;
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for (i, d) in dy.data().iter().enumerate() {
            let ch = (i / inner) % c;
            sum_dy[ch] += d;
            sum_dy_xhat[ch] += d * xhat[i];
        }
        for ch in 0..c {
            self.beta.grad[ch] += sum_dy[ch];
            self.gamma.grad[ch] += sum_dy_xhat[ch];
        }
        for (i, d) in dy.data_mut().iter_mut().enumerate() {
            let ch = (i / inner) % c;
            let g = self.gamma.value[ch];
            if fixed {
                *d *= g * inv_std[ch];
            } else {
                *d = g * inv_std[ch] / count
                    * (count * *d - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch]);
            }
        }
        dy
    }
}

/// Adaptive average pooling over the last two axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdaptiveAvgPool {
    pub out: [usize; 2],
}

impl AdaptiveAvgPool {
    fn bins(input: usize, output: usize) -> Vec<(usize, usize)> {
        (0..output)
            .map(|i| {
                let lo = i * input / output;
                let hi = ((i + 1) * input).div_ceil(output);
                (lo, hi)
            })
            .collect()
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() < 3 {
            return Err(Error::arg(format!("pooling needs >= 3 axes, got {shape:?}")));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let [oh, ow] = self.out;
        let planes = x.len() / (h * w);
        let rb = Self::bins(h, oh);
        let cb = Self::bins(w, ow);
        let mut y = Vec::with_capacity(planes * oh * ow);
        for plane in x.data().chunks(h * w) {
            for &(r0, r1) in &rb {
                for &(c0, c1) in &cb {
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        acc += plane[r * w + c0..r * w + c1].iter().sum::<f64>();
                    }
                    y.push(acc / ((r1 - r0) * (c1 - c0)) as f64);
                }
            }
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.extend([oh, ow]);
        Tensor::new(out_shape, y)
    }

    fn backward(&self, in_shape: &[usize], dy: &Tensor) -> Tensor {
        let (h, w) = (in_shape[in_shape.len() - 2], in_shape[in_shape.len() - 1]);
        let [oh, ow] = self.out;
        let rb = Self::bins(h, oh);
        let cb = Self::bins(w, ow);
        let mut dx = Tensor::zeros(in_shape.to_vec());
        for (plane, g) in dx.data_mut().chunks_mut(h * w).zip(dy.data().chunks(oh * ow)) {
            for (i, &(r0, r1)) in rb.iter().enumerate() {
                for (j, &(c0, c1)) in cb.iter().enumerate() {
                    let share = g[i * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                    for r in r0..r1 {
                        for v in &mut plane[r * w + c0..r * w + c1] {
                            *v += share;
                        }
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Linear(Linear),
    Conv(Conv),
    ConvTranspose(ConvTranspose),
    BatchNorm(BatchNorm),
    Relu,
    LeakyRelu(f64),
    Pool(AdaptiveAvgPool),
    /// Per-element shape (batch axis excluded).
    Reshape(Vec<usize>),
}

impl Layer {
    pub fn forward(&mut self, x: Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
        if let Layer::BatchNorm(l) = self {
            let (y, cache, update) = l.forward(x, mode)?;
            if let Some(stats) = update {
                l.absorb(stats);
            }
            return Ok((y, cache));
        }
        self.apply(x, mode)
    }

    /// Forward pass that never touches running statistics; `Train` behaves
    /// like `Frozen`.
    pub fn apply(&self, x: Tensor, mode: Mode) -> Result<(Tensor, Cache)> {
        match self {
            Layer::Linear(l) => {
                let y = l.forward(&x)?;
                Ok((y, Cache::Input(x)))
            }
            Layer::Conv(l) => {
                let y = l.forward(&x)?;
                Ok((y, Cache::Input(x)))
            }
            Layer::ConvTranspose(l) => {
                let y = l.forward(&x)?;
                Ok((y, Cache::Input(x)))
            }
            Layer::BatchNorm(l) => {
                let mode = if mode == Mode::Train { Mode::Frozen } else { mode };
                let (y, cache, _) = l.forward(x, mode)?;
                Ok((y, cache))
            }
            Layer::Relu => {
                let mut x = x;
                let mask: Vec<bool> = x.data().iter().map(|v| *v > 0.0).collect();
                for (v, &m) in x.data_mut().iter_mut().zip(&mask) {
                    if !m {
                        *v = 0.0;
                    }
                }
                Ok((x, Cache::Mask(mask)))
            }
            Layer::LeakyRelu(slope) => {
                let mut x = x;
                let mask: Vec<bool> = x.data().iter().map(|v| *v > 0.0).collect();
                for (v, &m) in x.data_mut().iter_mut().zip(&mask) {
                    if !m {
                        *v *= *slope;
                    }
                }
                Ok((x, Cache::Mask(mask)))
            }
            Layer::Pool(p) => {
                let y = p.forward(&x)?;
                Ok((y, Cache::Shape(x.shape().to_vec())))
            }
            Layer::Reshape(inner) => {
                let shape = x.shape().to_vec();
                Ok((x.reshape_rows(inner)?, Cache::Shape(shape)))
            }
        }
    }

    pub fn backward(&mut self, cache: &Cache, dy: Tensor) -> Tensor {
        match (self, cache) {
            (Layer::Linear(l), Cache::Input(x)) => l.backward(x, &dy),
            (Layer::Conv(l), Cache::Input(x)) => l.backward(x, &dy),
            (Layer::ConvTranspose(l), Cache::Input(x)) => l.backward(x, &dy),
            (
                Layer::BatchNorm(l),
                Cache::Norm {
                    xhat,
                    inv_std,
                    fixed,
                },
            ) => l.backward(xhat, inv_std, *fixed, dy),
            (Layer::Relu, Cache::Mask(mask)) => {
                let mut dy = dy;
                for (d, &m) in dy.data_mut().iter_mut().zip(mask) {
                    if !m {
                        *d = 0.0;
                    }
                }
                dy
            }
            (Layer::LeakyRelu(slope), Cache::Mask(mask)) => {
                let mut dy = dy;
                for (d, &m) in dy.data_mut().iter_mut().zip(mask) {
                    if !m {
                        *d *= *slope;
                    }
                }
                dy
            }
            (Layer::Pool(p), Cache::Shape(shape)) => p.backward(shape, &dy),
            (Layer::Reshape(_), Cache::Shape(shape)) => {
                let b = dy.batch();
                let data = dy.into_data();
                let mut full = shape.clone();
                full[0] = b;
                Tensor::new(full, data).expect("reshape preserves size")
            }
            _ => panic!("cache does not belong to this layer"),
        }
    }
}

impl Module for Layer {
    fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::Conv(l) => vec![&l.weight, &l.bias],
            Layer::ConvTranspose(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta, &l.running_mean, &l.running_var],
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::ConvTranspose(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![
                &mut l.gamma,
                &mut l.beta,
                &mut l.running_mean,
                &mut l.running_var,
            ],
            _ => Vec::new(),
        }
    }
}

/// Caches of one forward pass through a [`Sequential`].
#[derive(Debug, Clone, Default)]
pub struct Trace(Vec<Cache>);

#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&mut self, mut x: Tensor, mode: Mode) -> Result<(Tensor, Trace)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let (y, cache) = layer.forward(x, mode)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, Trace(caches)))
    }

    pub fn backward(&mut self, trace: &Trace, mut dy: Tensor) -> Tensor {
        for (layer, cache) in self.layers.iter_mut().zip(&trace.0).rev() {
            dy = layer.backward(cache, dy);
        }
        dy
    }

    /// Forward pass without caches or running-statistic updates.
    pub fn infer(&self, x: Tensor, mode: Mode) -> Result<Tensor> {
        let mut x = x;
        for layer in &self.layers {
            x = layer.apply(x, mode)?.0;
        }
        Ok(x)
    }
}

impl Module for Sequential {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}
