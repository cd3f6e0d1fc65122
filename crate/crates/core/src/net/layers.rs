//! Layer kinds with batched forward and backward passes.
//!
//! Activations are `[batch, …]` tensors. Training-mode forward passes cache
//! what their backward pass needs; [`LayerWeights::infer`] is the read-only
//! inference path (batch-norm running statistics, dropout off).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use super::NetError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    Relu,
    MaxPool {
        size: usize,
    },
    Se {
        channels: usize,
        reduction: usize,
    },
    Dropout {
        p: f64,
    },
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Softmax,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::Se { .. } => "se",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Softmax => "softmax",
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Config(m));
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } if in_ch == 0 || out_ch == 0 || kernel == 0 || stride == 0 => {
                bad(format!("conv2d dimensions must be positive: {self:?}"))
            }
            LayerSpec::BatchNorm { channels, eps, momentum }
                if channels == 0 || !(eps > 0.0) || !(0.0..=1.0).contains(&momentum) =>
            {
                bad(format!("invalid batch norm {self:?}"))
            }
            LayerSpec::MaxPool { size: 0 } => bad("pool size must be positive".into()),
            LayerSpec::Se { channels, reduction }
                if reduction == 0 || channels == 0 || channels % reduction != 0 || channels < reduction =>
            {
                bad(format!("SE reduction {reduction} must divide channel count {channels}"))
            }
            LayerSpec::Dropout { p } if !(0.0..1.0).contains(&p) => bad(format!("dropout p = {p} outside [0, 1)")),
            LayerSpec::Dense {
                in_features,
                out_features,
            } if in_features == 0 || out_features == 0 => bad(format!("dense dimensions must be positive: {self:?}")),
            _ => Ok(()),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NetError> {
        let mismatch = |want: &str| NetError::Shape(format!("{} expects {want}, got input shape {input:?}", self.name()));
        match *self {
            LayerSpec::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            } => match *input {
                [c, h, w] if c == in_ch && h + 2 * pad >= kernel && w + 2 * pad >= kernel => Ok(vec![
                    out_ch,
                    (h + 2 * pad - kernel) / stride + 1,
                    (w + 2 * pad - kernel) / stride + 1,
                ]),
                _ => Err(mismatch(&format!("[{in_ch}, H ≥ {kernel}, W ≥ {kernel}]"))),
            },
            LayerSpec::BatchNorm { channels, .. } => match input.first() {
                Some(&c) if c == channels => Ok(input.to_vec()),
                _ => Err(mismatch(&format!("{channels} channels"))),
            },
            LayerSpec::Relu | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::MaxPool { size } => match *input {
                [c, h, w] if h >= size && w >= size => Ok(vec![c, h / size, w / size]),
                _ => Err(mismatch(&format!("[C, H ≥ {size}, W ≥ {size}]"))),
            },
            LayerSpec::Se { channels, .. } => match *input {
                [c, _, _] if c == channels => Ok(input.to_vec()),
                _ => Err(mismatch(&format!("[{channels}, H, W]"))),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dense {
                in_features,
                out_features,
            } => match *input {
                [f] if f == in_features => Ok(vec![out_features]),
                _ => Err(mismatch(&format!("[{in_features}]"))),
            },
            LayerSpec::Softmax => match *input {
                [_] => Ok(input.to_vec()),
                _ => Err(mismatch("a flat vector")),
            },
        }
    }

    /// Shapes of the trainable parameters, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_ch, out_ch, kernel, ..
            } => vec![vec![out_ch, in_ch, kernel, kernel], vec![out_ch]],
            LayerSpec::BatchNorm { channels, .. } => vec![vec![channels], vec![channels]],
            LayerSpec::Se { channels, reduction } => {
                vec![vec![channels / reduction, channels], vec![channels, channels / reduction]]
            }
            LayerSpec::Dense {
                in_features,
                out_features,
            } => vec![vec![out_features, in_features], vec![out_features]],
            _ => Vec::new(),
        }
    }

    /// Shapes of non-trainable state (batch-norm running mean and variance).
    pub fn state_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::BatchNorm { channels, .. } => vec![vec![channels], vec![channels]],
            _ => Vec::new(),
        }
    }
}

/// Parameters and running state of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub spec: LayerSpec,
    pub params: Vec<Tensor<T>>,
    pub state: Vec<Tensor<T>>,
}

impl<T: Scalar> LayerWeights<T> {
    /// Fan-in scaled Gaussian weights, zero biases, batch-norm scale 1 and shift 0.
    pub fn init<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Self {
        let gaussian = |shape: &[usize], std: f64, rng: &mut R| {
            let data = (0..shape.iter().product::<usize>())
                .map(|_| T::of(std * { let z: f64 = StandardNormal.sample(rng); z }))
                .collect();
            Tensor::from_vec(shape, data)
        };
        let filled = |shape: &[usize], v: f64| Tensor::from_vec(shape, vec![T::of(v); shape.iter().product()]);
        let shapes = spec.param_shapes();
        let params = match spec {
            LayerSpec::Conv2d { in_ch, kernel, .. } => vec![
                gaussian(&shapes[0], (2.0 / (in_ch * kernel * kernel) as f64).sqrt(), rng),
                filled(&shapes[1], 0.0),
            ],
            LayerSpec::Dense { in_features, .. } => vec![
                gaussian(&shapes[0], (2.0 / in_features as f64).sqrt(), rng),
                filled(&shapes[1], 0.0),
            ],
            LayerSpec::Se { channels, reduction } => vec![
                gaussian(&shapes[0], (2.0 / channels as f64).sqrt(), rng),
                gaussian(&shapes[1], (1.0 / (channels / reduction) as f64).sqrt(), rng),
            ],
            LayerSpec::BatchNorm { .. } => vec![filled(&shapes[0], 1.0), filled(&shapes[1], 0.0)],
            _ => Vec::new(),
        };
        let state = match spec {
            LayerSpec::BatchNorm { channels, .. } => vec![filled(&[channels], 0.0), filled(&[channels], 1.0)],
            _ => Vec::new(),
        };
        Self { spec, params, state }
    }

    pub fn cast<U: Scalar>(&self) -> LayerWeights<U> {
        LayerWeights {
            spec: self.spec.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            state: self.state.iter().map(Tensor::cast).collect(),
        }
    }

    /// Inference-mode forward pass.
    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        match self.spec {
            LayerSpec::Conv2d { .. } => conv_forward(x, &self.spec, &self.params[0].data, &self.params[1].data),
            LayerSpec::BatchNorm { eps, .. } => {
                let (mean, var) = (&self.state[0].data, &self.state[1].data);
                let channels = mean.len();
                let mut scale = vec![T::zero(); channels];
                let mut shift = vec![T::zero(); channels];
                for c in 0..channels {
                    let inv = 1.0 / (var[c].f64() + eps).sqrt();
                    let g = self.params[0].data[c].f64() * inv;
                    scale[c] = T::of(g);
                    shift[c] = T::of(self.params[1].data[c].f64() - mean[c].f64() * g);
                }
                let spatial = x.sample_len() / channels;
                let mut y = x.clone();
                for (i, v) in y.data.iter_mut().enumerate() {
                    let c = (i / spatial) % channels;
                    *v = *v * scale[c] + shift[c];
                }
                y
            }
            LayerSpec::Relu => relu(x),
            LayerSpec::MaxPool { size } => maxpool_forward(x, size).0,
            LayerSpec::Se { .. } => se_forward(x, &self.spec, &self.params[0].data, &self.params[1].data).0,
            LayerSpec::Dropout { .. } => x.clone(),
            LayerSpec::Flatten => flatten(x),
            LayerSpec::Dense { .. } => dense_forward(x, &self.params[0].data, &self.params[1].data),
            LayerSpec::Softmax => softmax(x),
        }
    }
}

enum Cache<T> {
    Empty,
    Input(Tensor<T>),
    Output(Tensor<T>),
    Norm { xhat: Vec<T>, inv_std: Vec<f64> },
    Pool { argmax: Vec<u32>, input_shape: Vec<usize> },
    Se(Tensor<T>, SeIntermediates<T>),
    Mask(Vec<T>),
    Shape(Vec<usize>),
}

/// A layer being trained: weights plus gradient accumulators and cached activations.
pub struct Layer<T> {
    pub weights: LayerWeights<T>,
    pub grads: Vec<Vec<T>>,
    cache: Cache<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn new(weights: LayerWeights<T>) -> Self {
        let grads = weights.params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        Self {
            weights,
            grads,
            cache: Cache::Empty,
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn clear_cache(&mut self) {
        self.cache = Cache::Empty;
    }

    /// Training-mode forward pass; caches what [`Layer::backward`] needs.
    pub fn forward<R: Rng + ?Sized>(&mut self, x: Tensor<T>, rng: &mut R) -> Tensor<T> {
        let w = &mut self.weights;
        match w.spec {
            LayerSpec::Conv2d { .. } => {
                let y = conv_forward(&x, &w.spec, &w.params[0].data, &w.params[1].data);
                self.cache = Cache::Input(x);
                y
            }
            LayerSpec::BatchNorm { eps, momentum, .. } => {
                let (y, xhat, inv_std) = batchnorm_train(&x, &mut w.params, &mut w.state, eps, momentum);
                self.cache = Cache::Norm { xhat, inv_std };
                y
            }
            LayerSpec::Relu => {
                let y = relu(&x);
                self.cache = Cache::Output(y.clone());
                y
            }
            LayerSpec::MaxPool { size } => {
                let (y, argmax) = maxpool_forward(&x, size);
                self.cache = Cache::Pool {
                    argmax,
                    input_shape: x.shape,
                };
                y
            }
            LayerSpec::Se { .. } => {
                let (y, mid) = se_forward(&x, &w.spec, &w.params[0].data, &w.params[1].data);
                self.cache = Cache::Se(x, mid);
                y
            }
            LayerSpec::Dropout { p } => {
                if p == 0.0 {
                    self.cache = Cache::Empty;
                    return x;
                }
                let keep = T::of(1.0 / (1.0 - p));
                let mask: Vec<T> = (0..x.len())
                    .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
                    .collect();
                let mut y = x;
                y.data.iter_mut().zip(&mask).for_each(|(v, m)| *v = *v * *m);
                self.cache = Cache::Mask(mask);
                y
            }
            LayerSpec::Flatten => {
                let y = flatten(&x);
                self.cache = Cache::Shape(x.shape);
                y
            }
            LayerSpec::Dense { .. } => {
                let y = dense_forward(&x, &w.params[0].data, &w.params[1].data);
                self.cache = Cache::Input(x);
                y
            }
            LayerSpec::Softmax => {
                let y = softmax(&x);
                self.cache = Cache::Output(y.clone());
                y
            }
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: Tensor<T>) -> Tensor<T> {
        let cache = std::mem::replace(&mut self.cache, Cache::Empty);
        let w = &self.weights;
        match (&w.spec, cache) {
            (LayerSpec::Conv2d { .. }, Cache::Input(x)) => {
                let (gw, rest) = self.grads.split_at_mut(1);
                conv_backward(&x, &dy, &w.spec, &w.params[0].data, &mut gw[0], &mut rest[0])
            }
            (LayerSpec::BatchNorm { .. }, Cache::Norm { xhat, inv_std }) => {
                let (gg, gb) = self.grads.split_at_mut(1);
                batchnorm_backward(&dy, &xhat, &inv_std, &w.params[0].data, &mut gg[0], &mut gb[0])
            }
            (LayerSpec::Relu, Cache::Output(y)) => {
                let mut dx = dy;
                dx.data
                    .iter_mut()
                    .zip(&y.data)
                    .for_each(|(d, &v)| if v <= T::zero() { *d = T::zero() });
                dx
            }
            (LayerSpec::MaxPool { .. }, Cache::Pool { argmax, input_shape }) => {
                maxpool_backward(&dy, &argmax, &input_shape)
            }
            (LayerSpec::Se { .. }, Cache::Se(u, mid)) => {
                let (g1, g2) = self.grads.split_at_mut(1);
                se_backward(&dy, &u, &mid, &w.params[0].data, &w.params[1].data, &mut g1[0], &mut g2[0])
            }
            (LayerSpec::Dropout { .. }, Cache::Mask(mask)) => {
                let mut dx = dy;
                dx.data.iter_mut().zip(&mask).for_each(|(d, m)| *d = *d * *m);
                dx
            }
            (LayerSpec::Dropout { .. }, Cache::Empty) => dy,
            (LayerSpec::Flatten, Cache::Shape(shape)) => Tensor::from_vec(&shape, dy.data),
            (LayerSpec::Dense { .. }, Cache::Input(x)) => {
                let (gw, gb) = self.grads.split_at_mut(1);
                dense_backward(&x, &dy, &w.params[0].data, &mut gw[0], &mut gb[0])
            }
            (LayerSpec::Softmax, Cache::Output(y)) => softmax_backward(&y, &dy),
            (spec, _) => panic!("{} backward called without a matching forward pass", spec.name()),
        }
    }
}

#[cfg(feature = "parallel")]
fn map_samples<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_samples<R: Send>(n: usize, f: impl Fn(usize) -> R + Sync + Send) -> Vec<R> {
    (0..n).map(f).collect()
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(spec: &LayerSpec, in_shape: &[usize]) -> Self {
        let LayerSpec::Conv2d {
            in_ch,
            kernel,
            stride,
            pad,
            ..
        } = *spec
        else {
            unreachable!()
        };
        let (h, w) = (in_shape[2], in_shape[3]);
        assert_eq!(in_shape[1], in_ch, "conv2d input channel mismatch");
        Self {
            c: in_ch,
            h,
            w,
            k: kernel,
            stride,
            pad,
            ho: (h + 2 * pad - kernel) / stride + 1,
            wo: (w + 2 * pad - kernel) / stride + 1,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Input position feeding output position `o` at kernel offset `kk`, if inside the image.
    #[inline]
    fn source(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + kk) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &mut cols[((c * g.k + ki) * g.k + kj) * n..][..n];
                for oy in 0..g.ho {
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    match g.source(oy, ki, g.h) {
                        None => dst.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) => {
                            let src = &x[(c * g.h + iy) * g.w..][..g.w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = g.source(ox, kj, g.w).map_or(T::zero(), |ix| src[ix]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let n = g.cols();
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = &cols[((c * g.k + ki) * g.k + kj) * n..][..n];
                for oy in 0..g.ho {
                    let Some(iy) = g.source(oy, ki, g.h) else { continue };
                    let dst = &mut dx[(c * g.h + iy) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        if let Some(ix) = g.source(ox, kj, g.w) {
                            dst[ix] = dst[ix] + row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `Z^p = Σ_d W^{p,d} ⊛ X^d + b^p` via im2col and a matrix product per sample.
pub fn conv_forward<T: Scalar>(x: &Tensor<T>, spec: &LayerSpec, w: &[T], b: &[T]) -> Tensor<T> {
    let g = ConvGeom::new(spec, &x.shape);
    let out_ch = b.len();
    let (k, n) = (g.rows(), g.cols());
    let outs = map_samples(x.batch(), |s| {
        let mut cols = vec![T::zero(); k * n];
        im2col(x.sample(s), &g, &mut cols);
        let mut y = vec![T::zero(); out_ch * n];
        T::gemm(out_ch, k, n, T::one(), w, k, 1, &cols, n, 1, T::zero(), &mut y, n, 1);
        for (row, &bias) in y.chunks_exact_mut(n).zip(b) {
            row.iter_mut().for_each(|v| *v = *v + bias);
        }
        y
    });
    Tensor::from_vec(&[x.batch(), out_ch, g.ho, g.wo], outs.concat())
}

fn conv_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>, spec: &LayerSpec, w: &[T], gw: &mut [T], gb: &mut [T]) -> Tensor<T> {
    let g = ConvGeom::new(spec, &x.shape);
    let out_ch = gb.len();
    let (k, n) = (g.rows(), g.cols());
    let per_sample = map_samples(x.batch(), |s| {
        let dys = dy.sample(s);
        let mut cols = vec![T::zero(); k * n];
        im2col(x.sample(s), &g, &mut cols);
        let mut dw = vec![T::zero(); out_ch * k];
        T::gemm(out_ch, n, k, T::one(), dys, n, 1, &cols, 1, n, T::zero(), &mut dw, k, 1);
        T::gemm(k, out_ch, n, T::one(), w, 1, k, dys, n, 1, T::zero(), &mut cols, n, 1);
        let mut dx = vec![T::zero(); x.sample_len()];
        col2im(&cols, &g, &mut dx);
        (dw, dx)
    });
    // Sample gradients are combined in index order, independent of scheduling.
    let mut dx = Vec::with_capacity(x.len());
    for (s, (dw, dxs)) in per_sample.into_iter().enumerate() {
        gw.iter_mut().zip(&dw).for_each(|(a, &v)| *a = *a + v);
        for (p, row) in dy.sample(s).chunks_exact(n).enumerate() {
            gb[p] = gb[p] + row.iter().copied().sum();
        }
        dx.extend(dxs);
    }
    Tensor::from_vec(&x.shape, dx)
}

/// Batch statistics over every axis but the channel axis (axis 1).
fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    params: &mut [Tensor<T>],
    state: &mut [Tensor<T>],
    eps: f64,
    momentum: f64,
) -> (Tensor<T>, Vec<T>, Vec<f64>) {
    let channels = x.shape[1];
    let spatial = x.sample_len() / channels;
    let n = (x.batch() * spatial) as f64;
    let plane = |b: usize, c: usize| &x.data[(b * channels + c) * spatial..][..spatial];
    let mut y = Tensor::zeros(&x.shape);
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![0.0; channels];
    for c in 0..channels {
        let mean = (0..x.batch()).map(|b| plane(b, c).iter().map(|v| v.f64()).sum::<f64>()).sum::<f64>() / n;
        let var = (0..x.batch())
            .map(|b| plane(b, c).iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[c] = inv;
        let (gamma, beta) = (params[0].data[c], params[1].data[c]);
        for b in 0..x.batch() {
            let off = (b * channels + c) * spatial;
            for i in off..off + spatial {
                let h = T::of((x.data[i].f64() - mean) * inv);
                xhat[i] = h;
                y.data[i] = gamma * h + beta;
            }
        }
        let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
        let rm = &mut state[0].data[c];
        *rm = T::of((1.0 - momentum) * rm.f64() + momentum * mean);
        let rv = &mut state[1].data[c];
        *rv = T::of((1.0 - momentum) * rv.f64() + momentum * unbiased);
    }
    (y, xhat, inv_std)
}

fn batchnorm_backward<T: Scalar>(dy: &Tensor<T>, xhat: &[T], inv_std: &[f64], gamma: &[T], gg: &mut [T], gb: &mut [T]) -> Tensor<T> {
    let channels = inv_std.len();
    let spatial = dy.sample_len() / channels;
    let n = (dy.batch() * spatial) as f64;
    let mut dx = Tensor::zeros(&dy.shape);
    for c in 0..channels {
        let idx = (0..dy.batch()).flat_map(|b| {
            let off = (b * channels + c) * spatial;
            off..off + spatial
        });
        let (mut dgamma, mut dbeta) = (0.0, 0.0);
        for i in idx.clone() {
            dgamma += dy.data[i].f64() * xhat[i].f64();
            dbeta += dy.data[i].f64();
        }
        gg[c] = gg[c] + T::of(dgamma);
        gb[c] = gb[c] + T::of(dbeta);
        let k = gamma[c].f64() * inv_std[c] / n;
        for i in idx {
            dx.data[i] = T::of(k * (n * dy.data[i].f64() - dbeta - xhat[i].f64() * dgamma));
        }
    }
    dx
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
    y
}

/// Non-overlapping `size × size` max pooling; trailing rows/columns that do
/// not fill a window are dropped. Ties resolve to the first maximum.
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>, size: usize) -> (Tensor<T>, Vec<u32>) {
    let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (ho, wo) = (h / size, w / size);
    let mut y = Tensor::zeros(&[b, c, ho, wo]);
    let mut argmax = vec![0u32; y.len()];
    for plane in 0..b * c {
        let src = &x.data[plane * h * w..][..h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = (oy * size + dy) * w + ox * size + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                y.data[o] = src[best];
                argmax[o] = best as u32;
            }
        }
    }
    (y, argmax)
}

fn maxpool_backward<T: Scalar>(dy: &Tensor<T>, argmax: &[u32], input_shape: &[usize]) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let plane_in = input_shape[2] * input_shape[3];
    let plane_out = dy.shape[2] * dy.shape[3];
    for (o, (&g, &a)) in dy.data.iter().zip(argmax).enumerate() {
        let i = (o / plane_out) * plane_in + a as usize;
        dx.data[i] = dx.data[i] + g;
    }
    dx
}

/// SE intermediates kept for the backward pass.
pub struct SeIntermediates<T> {
    /// Squeezed channel descriptors, `[batch, C]`.
    pub z: Vec<T>,
    /// Hidden excitation activations, `[batch, C/r]`.
    pub h: Vec<T>,
    /// Channel gates, `[batch, C]`.
    pub s: Vec<T>,
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Squeeze (spatial mean), excite (`σ(W₂·ReLU(W₁·z))`), and rescale channels.
pub fn se_forward<T: Scalar>(x: &Tensor<T>, spec: &LayerSpec, w1: &[T], w2: &[T]) -> (Tensor<T>, SeIntermediates<T>) {
    let LayerSpec::Se { channels, reduction } = *spec else { unreachable!() };
    let hidden = channels / reduction;
    let batch = x.batch();
    let spatial = x.sample_len() / channels;
    let mut z = vec![T::zero(); batch * channels];
    for (zv, plane) in z.iter_mut().zip(x.data.chunks_exact(spatial)) {
        *zv = T::of(plane.iter().map(|v| v.f64()).sum::<f64>() / spatial as f64);
    }
    let mut h = vec![T::zero(); batch * hidden];
    let mut s = vec![T::zero(); batch * channels];
    for b in 0..batch {
        let zb = &z[b * channels..][..channels];
        for j in 0..hidden {
            let a: T = w1[j * channels..][..channels].iter().zip(zb).map(|(&w, &v)| w * v).sum();
            h[b * hidden + j] = a.max(T::zero());
        }
        let hb = &h[b * hidden..][..hidden];
        for c in 0..channels {
            let a: T = w2[c * hidden..][..hidden].iter().zip(hb).map(|(&w, &v)| w * v).sum();
            s[b * channels + c] = sigmoid(a);
        }
    }
    let mut y = x.clone();
    for (plane, &sv) in y.data.chunks_exact_mut(spatial).zip(&s) {
        plane.iter_mut().for_each(|v| *v = *v * sv);
    }
    (y, SeIntermediates { z, h, s })
}

fn se_backward<T: Scalar>(
    dy: &Tensor<T>,
    u: &Tensor<T>,
    c: &SeIntermediates<T>,
    w1: &[T],
    w2: &[T],
    g1: &mut [T],
    g2: &mut [T],
) -> Tensor<T> {
    let channels = u.shape[1];
    let hidden = w1.len() / channels;
    let batch = dy.batch();
    let spatial = dy.sample_len() / channels;
    let mut dx = dy.clone();
    let mut dpre2 = vec![T::zero(); batch * channels];
    for (i, ((dplane, uplane), &sv)) in dy
        .data
        .chunks_exact(spatial)
        .zip(u.data.chunks_exact(spatial))
        .zip(&c.s)
        .enumerate()
    {
        let ds: T = dplane.iter().zip(uplane).map(|(&d, &u)| d * u).sum();
        dpre2[i] = ds * sv * (T::one() - sv);
        dx.data[i * spatial..(i + 1) * spatial].iter_mut().for_each(|v| *v = *v * sv);
    }
    for b in 0..batch {
        let dp2 = &dpre2[b * channels..][..channels];
        let hb = &c.h[b * hidden..][..hidden];
        let zb = &c.z[b * channels..][..channels];
        let mut dpre1 = vec![T::zero(); hidden];
        for (j, d1) in dpre1.iter_mut().enumerate() {
            let mut dh = T::zero();
            for ch in 0..channels {
                g2[ch * hidden + j] = g2[ch * hidden + j] + dp2[ch] * hb[j];
                dh = dh + dp2[ch] * w2[ch * hidden + j];
            }
            *d1 = if hb[j] > T::zero() { dh } else { T::zero() };
        }
        let inv_spatial = T::of(1.0 / spatial as f64);
        for ch in 0..channels {
            let mut dz = T::zero();
            for (j, &d1) in dpre1.iter().enumerate() {
                g1[j * channels + ch] = g1[j * channels + ch] + d1 * zb[ch];
                dz = dz + d1 * w1[j * channels + ch];
            }
            let add = dz * inv_spatial;
            dx.data[(b * channels + ch) * spatial..][..spatial]
                .iter_mut()
                .for_each(|v| *v = *v + add);
        }
    }
    dx
}

pub fn flatten<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(&[x.batch(), x.sample_len()], x.data.clone())
}

/// `Y = X·Wᵀ + b` for `X` of shape `[batch, in]` and `W` of shape `[out, in]`.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &[T], b: &[T]) -> Tensor<T> {
    let (batch, fin, fout) = (x.batch(), x.sample_len(), b.len());
    let mut y = Tensor::zeros(&[batch, fout]);
    T::gemm(batch, fin, fout, T::one(), &x.data, fin, 1, w, 1, fin, T::zero(), &mut y.data, fout, 1);
    for row in y.data.chunks_exact_mut(fout) {
        row.iter_mut().zip(b).for_each(|(v, &bias)| *v = *v + bias);
    }
    y
}

fn dense_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>, w: &[T], gw: &mut [T], gb: &mut [T]) -> Tensor<T> {
    let (batch, fin, fout) = (x.batch(), x.sample_len(), gb.len());
    T::gemm(fout, batch, fin, T::one(), &dy.data, 1, fout, &x.data, fin, 1, T::one(), gw, fin, 1);
    for row in dy.data.chunks_exact(fout) {
        gb.iter_mut().zip(row).for_each(|(g, &d)| *g = *g + d);
    }
    let mut dx = Tensor::zeros(&x.shape);
    T::gemm(batch, fout, fin, T::one(), &dy.data, fout, 1, w, fin, 1, T::zero(), &mut dx.data, fin, 1);
    dx
}

/// Row-wise softmax over the last axis.
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.sample_len();
    let mut y = x.clone();
    for row in y.data.chunks_exact_mut(n) {
        let p = softmax_f64(&row.iter().map(|v| v.f64()).collect::<Vec<_>>());
        row.iter_mut().zip(p).for_each(|(v, q)| *v = T::of(q));
    }
    y
}

fn softmax_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let n = y.sample_len();
    let mut dx = dy.clone();
    for (drow, yrow) in dx.data.chunks_exact_mut(n).zip(y.data.chunks_exact(n)) {
        let dot: T = drow.iter().zip(yrow).map(|(&d, &p)| d * p).sum();
        drow.iter_mut().zip(yrow).for_each(|(d, &p)| *d = p * (*d - dot));
    }
    dx
}

/// Numerically stable softmax in double precision.
pub fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub const PROB_FLOOR: f64 = 1e-12;

/// `−Σ_c y_c·ln f_c` for a one-hot `y`, with probabilities floored at 1e-12.
pub fn cross_entropy(probs: &[f64], target: usize) -> f64 {
    -probs[target].max(PROB_FLOOR).ln()
}

/// Mean cross-entropy over a batch of logits and the gradient with respect to
/// the logits, `(softmax − onehot) / batch`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> (f64, Tensor<T>, Vec<Vec<f64>>) {
    let n = logits.sample_len();
    let batch = logits.batch();
    let mut grad = Tensor::zeros(&logits.shape);
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(batch);
    for (b, &t) in targets.iter().enumerate() {
        let p = softmax_f64(&logits.sample(b).iter().map(|v| v.f64()).collect::<Vec<_>>());
        loss += cross_entropy(&p, t);
        for (c, &pc) in p.iter().enumerate() {
            let onehot = if c == t { 1.0 } else { 0.0 };
            grad.data[b * n + c] = T::of((pc - onehot) / batch as f64);
        }
        probs.push(p);
    }
    (loss / batch as f64, grad, probs)
}

/// Reverses the column order (horizontal) and/or row order (vertical) of
/// every channel of a `[C, H, W]` sample in place.
pub fn flip_sample<T: Copy>(data: &mut [T], channels: usize, height: usize, width: usize, horizontal: bool, vertical: bool) {
    for c in 0..channels {
        let plane = &mut data[c * height * width..][..height * width];
        if horizontal {
            plane.chunks_exact_mut(width).for_each(|row| row.reverse());
        }
        if vertical {
            for r in 0..height / 2 {
                let (top, bottom) = plane.split_at_mut((height - 1 - r) * width);
                top[r * width..(r + 1) * width].swap_with_slice(&mut bottom[..width]);
            }
        }
    }
}
