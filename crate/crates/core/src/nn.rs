//! Minimal layers with hand-written backward passes.
//!
//! Layers accumulate parameter gradients into their own [`Param`] buffers and
//! hand input gradients back to the caller, so a chain of layers can be
//! differentiated all the way to the homography parameters that produced its
//! input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A trainable buffer and its gradient accumulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<T>", into = "Vec<T>", bound = "T: Real")]
pub struct Param<T = f32> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> From<Vec<T>> for Param<T> {
    fn from(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self { value, grad }
    }
}

impl<T: Real> From<Param<T>> for Vec<T> {
    fn from(p: Param<T>) -> Self {
        p.value
    }
}

impl<T: Real> Param<T> {
    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    fn cast<U: Real>(&self) -> Param<U> {
        Param::from(self.value.iter().map(|v| U::of(v.f64())).collect::<Vec<U>>())
    }
}

/// How batch normalization obtains its statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and update the running averages.
    Batch,
    /// Normalize with the stored running statistics.
    Running,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Conv2d<T = f32> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Conv2d<T> {
    /// Kaiming-uniform initialization for a ReLU successor.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = (0..out_channels * fan_in)
            .map(|_| T::of(rng.gen_range(-bound..bound)))
            .collect::<Vec<_>>();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            weight: weight.into(),
            bias: vec![T::zero(); out_channels].into(),
        }
    }

    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [T]) {
        let k = self.kernel;
        let p = oh * ow;
        let (s, pad) = (self.stride as isize, self.padding as isize);
        for ci in 0..self.in_channels {
            let xc = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = oy as isize * s - pad + ky as isize;
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            drow.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let srow = &xc[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = ox as isize * s - pad + kx as isize;
                            *d = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                srow[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, oh: usize, ow: usize, x: &mut [T]) {
        let k = self.kernel;
        let p = oh * ow;
        let (s, pad) = (self.stride as isize, self.padding as isize);
        for ci in 0..self.in_channels {
            let xc = &mut x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = oy as isize * s - pad + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = ox as isize * s - pad + kx as isize;
                            if ix >= 0 && ix < w as isize {
                                xrow[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (oh, ow) = self.output_extent(h, w);
        let p = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let mut y = Tensor::zeros([n, self.out_channels, oh, ow]);
        let mut cols = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); kk * p]
        };
        for b in 0..n {
            let xb = x.item(b);
            let yb = y.item_mut(b);
            for (o, row) in yb.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = self.bias.value[o]);
            }
            let src: &[T] = if self.is_pointwise() {
                xb
            } else {
                self.im2col(xb, h, w, oh, ow, &mut cols);
                &cols
            };
            T::gemm(
                self.out_channels,
                kk,
                p,
                T::one(),
                &self.weight.value,
                kk as isize,
                1,
                src,
                p as isize,
                1,
                T::one(),
                yb,
                p as isize,
                1,
            );
        }
        Ok(y)
    }

    /// Accumulates parameter gradients (if `param_grads`) and returns the input gradient
    /// (if `input_grad`).
    pub fn backward(
        &mut self,
        x: &Tensor<T>,
        gy: &Tensor<T>,
        param_grads: bool,
        input_grad: bool,
    ) -> Option<Tensor<T>> {
        let [n, _, h, w] = x.shape();
        let (oh, ow) = (gy.height(), gy.width());
        let p = oh * ow;
        let kk = self.in_channels * self.kernel * self.kernel;
        let pointwise = self.is_pointwise();
        let mut gx = input_grad.then(|| Tensor::zeros(x.shape()));
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); kk * p] };
        let mut gcols = if pointwise || !input_grad {
            Vec::new()
        } else {
            vec![T::zero(); kk * p]
        };
        for b in 0..n {
            let gyb = gy.item(b);
            if param_grads {
                for (o, row) in gyb.chunks(p).enumerate() {
                    self.bias.grad[o] += row.iter().copied().sum::<T>();
                }
                let src: &[T] = if pointwise {
                    x.item(b)
                } else {
                    self.im2col(x.item(b), h, w, oh, ow, &mut cols);
                    &cols
                };
                // gW[o, r] += sum_p gy[o, p] * cols[r, p]
                T::gemm(
                    self.out_channels,
                    p,
                    kk,
                    T::one(),
                    gyb,
                    p as isize,
                    1,
                    src,
                    1,
                    p as isize,
                    T::one(),
                    &mut self.weight.grad,
                    kk as isize,
                    1,
                );
            }
            if let Some(gx) = gx.as_mut() {
                let dst: &mut [T] = if pointwise {
                    gx.item_mut(b)
                } else {
                    gcols.iter_mut().for_each(|v| *v = T::zero());
                    &mut gcols
                };
                // gcols[r, p] = sum_o W[o, r] * gy[o, p]
                T::gemm(
                    kk,
                    self.out_channels,
                    p,
                    T::one(),
                    &self.weight.value,
                    1,
                    kk as isize,
                    gyb,
                    p as isize,
                    1,
                    T::one(),
                    dst,
                    p as isize,
                    1,
                );
                if !pointwise {
                    self.col2im(&gcols, h, w, oh, ow, gx.item_mut(b));
                }
            }
        }
        gx
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct BatchNorm2d<T = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

/// Per-channel normalization used by the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    mode: NormMode,
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels].into(),
            beta: vec![T::zero(); channels].into(),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: NormMode) -> (Tensor<T>, NormCache<T>) {
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        match mode {
            NormMode::Batch => {
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        let off = x.index(b, ch, 0, 0);
                        s += x.data()[off..off + plane].iter().map(|v| v.f64()).sum::<f64>();
                    }
                    let m = s / count;
                    let mut v = 0.0;
                    for b in 0..n {
                        let off = x.index(b, ch, 0, 0);
                        v += x.data()[off..off + plane]
                            .iter()
                            .map(|t| (t.f64() - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = v / count;
                    let unbiased = if count > 1.0 { v / (count - 1.0) } else { var[ch] };
                    let mo = self.momentum;
                    self.running_mean[ch] =
                        T::of((1.0 - mo) * self.running_mean[ch].f64() + mo * m);
                    self.running_var[ch] =
                        T::of((1.0 - mo) * self.running_var[ch].f64() + mo * unbiased);
                }
            }
            NormMode::Running => {
                for ch in 0..c {
                    mean[ch] = self.running_mean[ch].f64();
                    var[ch] = self.running_var[ch].f64();
                }
            }
        }
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + self.eps).sqrt())).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for b in 0..n {
            for ch in 0..c {
                let off = x.index(b, ch, 0, 0);
                let (m, is) = (T::of(mean[ch]), inv_std[ch]);
                let (g, be) = (self.gamma.value[ch], self.beta.value[ch]);
                for i in off..off + plane {
                    let xh = (x.data()[i] - m) * is;
                    xhat.data_mut()[i] = xh;
                    y.data_mut()[i] = g * xh + be;
                }
            }
        }
        (y, NormCache { mode, xhat, inv_std })
    }

    pub fn backward(
        &mut self,
        cache: &NormCache<T>,
        gy: &Tensor<T>,
        param_grads: bool,
        input_grad: bool,
    ) -> Option<Tensor<T>> {
        let [n, c, h, w] = gy.shape();
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut gx = input_grad.then(|| Tensor::zeros(gy.shape()));
        for ch in 0..c {
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for b in 0..n {
                let off = gy.index(b, ch, 0, 0);
                for i in off..off + plane {
                    let g = gy.data()[i].f64();
                    sum_g += g;
                    sum_gx += g * cache.xhat.data()[i].f64();
                }
            }
            if param_grads {
                self.gamma.grad[ch] += T::of(sum_gx);
                self.beta.grad[ch] += T::of(sum_g);
            }
            let Some(gx) = gx.as_mut() else { continue };
            let gamma = self.gamma.value[ch].f64();
            let is = cache.inv_std[ch].f64();
            for b in 0..n {
                let off = gy.index(b, ch, 0, 0);
                for i in off..off + plane {
                    let g = gy.data()[i].f64();
                    gx.data_mut()[i] = T::of(match cache.mode {
                        NormMode::Running => g * gamma * is,
                        NormMode::Batch => {
                            let xh = cache.xhat.data()[i].f64();
                            gamma * is * (g - sum_g / count - xh * sum_gx / count)
                        }
                    });
                }
            }
        }
        gx
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub enum Layer<T = f32> {
    Conv(Conv2d<T>),
    Norm(BatchNorm2d<T>),
    Relu,
}

/// Activations retained by [`Sequential::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct SequentialCache<T> {
    inputs: Vec<Tensor<T>>,
    norms: Vec<Option<NormCache<T>>>,
}

/// A chain of layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Sequential<T = f32> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    /// Conv, batch norm and ReLU.
    pub fn conv_block(
        layers: &mut Vec<Layer<T>>,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) {
        layers.push(Layer::Conv(Conv2d::new(in_c, out_c, kernel, stride, rng)));
        layers.push(Layer::Norm(BatchNorm2d::new(out_c)));
        layers.push(Layer::Relu);
    }

    /// Forward pass without retaining activations.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv(c) => c.forward(&cur)?,
                Layer::Norm(bn) => bn.clone().forward(&cur, NormMode::Running).0,
                Layer::Relu => cur.map(|v| v.max(T::zero())),
            };
        }
        Ok(cur)
    }

    pub fn forward(
        &mut self,
        x: &Tensor<T>,
        mode: NormMode,
    ) -> Result<(Tensor<T>, SequentialCache<T>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut norms = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &mut self.layers {
            let (next, nc) = match layer {
                Layer::Conv(c) => (c.forward(&cur)?, None),
                Layer::Norm(bn) => {
                    let (y, c) = bn.forward(&cur, mode);
                    (y, Some(c))
                }
                Layer::Relu => (cur.map(|v| v.max(T::zero())), None),
            };
            inputs.push(std::mem::replace(&mut cur, next));
            norms.push(nc);
        }
        Ok((cur, SequentialCache { inputs, norms }))
    }

    pub fn backward(
        &mut self,
        cache: &SequentialCache<T>,
        gy: &Tensor<T>,
        param_grads: bool,
        input_grad: bool,
    ) -> Option<Tensor<T>> {
        let mut g = gy.clone();
        let last = 0;
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let need_input = i != last || input_grad;
            let x = &cache.inputs[i];
            let next = match layer {
                Layer::Conv(c) => c.backward(x, &g, param_grads, need_input),
                Layer::Norm(bn) => bn.backward(
                    cache.norms[i].as_ref().expect("norm cache"),
                    &g,
                    param_grads,
                    need_input,
                ),
                Layer::Relu => {
                    let mut out = g.clone();
                    for (o, xv) in out.data_mut().iter_mut().zip(x.data()) {
                        if *xv <= T::zero() {
                            *o = T::zero();
                        }
                    }
                    Some(out)
                }
            };
            {
                let n = next?;
                g = n
            }
        }
        input_grad.then_some(g)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&c.weight);
                    out.push(&c.bias);
                }
                Layer::Norm(bn) => {
                    out.push(&bn.gamma);
                    out.push(&bn.beta);
                }
                Layer::Relu => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                Layer::Norm(bn) => {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
                Layer::Relu => {}
            }
        }
        out
    }

    /// Every stored value: parameters followed by normalization running statistics.
    pub fn state(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(c.weight.value.as_slice());
                    out.push(c.bias.value.as_slice());
                }
                Layer::Norm(bn) => {
                    out.push(bn.gamma.value.as_slice());
                    out.push(bn.beta.value.as_slice());
                    out.push(bn.running_mean.as_slice());
                    out.push(bn.running_var.as_slice());
                }
                Layer::Relu => {}
            }
        }
        out
    }

    /// Mutable view of [`Sequential::state`] in the same order.
    pub fn state_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(c.weight.value.as_mut_slice());
                    out.push(c.bias.value.as_mut_slice());
                }
                Layer::Norm(bn) => {
                    out.push(bn.gamma.value.as_mut_slice());
                    out.push(bn.beta.value.as_mut_slice());
                    out.push(bn.running_mean.as_mut_slice());
                    out.push(bn.running_var.as_mut_slice());
                }
                Layer::Relu => {}
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn cast<U: Real>(&self) -> Sequential<U> {
        let cv = |v: &[T]| v.iter().map(|x| U::of(x.f64())).collect::<Vec<U>>();
        Sequential {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv(c) => Layer::Conv(Conv2d {
                        in_channels: c.in_channels,
                        out_channels: c.out_channels,
                        kernel: c.kernel,
                        stride: c.stride,
                        padding: c.padding,
                        weight: c.weight.cast(),
                        bias: c.bias.cast(),
                    }),
                    Layer::Norm(bn) => Layer::Norm(BatchNorm2d {
                        gamma: bn.gamma.cast(),
                        beta: bn.beta.cast(),
                        running_mean: cv(&bn.running_mean),
                        running_var: cv(&bn.running_var),
                        momentum: bn.momentum,
                        eps: bn.eps,
                    }),
                    Layer::Relu => Layer::Relu,
                })
                .collect(),
        }
    }

    /// Spatial stride and receptive-field size of the chain.
    pub fn receptive_field(&self) -> (usize, usize) {
        let mut stride = 1;
        let mut field = 1;
        for layer in &self.layers {
            if let Layer::Conv(c) = layer {
                field += (c.kernel - 1) * stride;
                stride *= c.stride;
            }
        }
        (stride, field)
    }
}

/// Stochastic gradient descent with momentum and L2 weight decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Applies one update; `params` must be passed in the same order every call.
    pub fn step(&mut self, params: Vec<&mut Param<f32>>) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        let (lr, mu, wd) = (self.lr as f32, self.momentum as f32, self.weight_decay as f32);
        for (p, vel) in params.into_iter().zip(&mut self.velocity) {
            for ((w, g), v) in p.value.iter_mut().zip(&p.grad).zip(vel.iter_mut()) {
                let g = *g + wd * *w;
                *v = mu * *v + g;
                *w -= lr * *v;
            }
        }
    }
}

/// Adam over a flat vector of `f64` parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        if self.m.len() != params.len() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
            self.t = 0;
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
