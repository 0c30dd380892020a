//! Layers with hand-written forward/backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::conv::{conv2d_backward, conv2d_forward, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How a network is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics updated only when `update_stats`.
    Train { update_stats: bool },
    /// Running statistics.
    Eval,
    /// Rectifiers become identity and normalization uses zero mean / unit variance,
    /// leaving an affine map of the input.
    Linearized,
}

/// Which parameter gradients a backward pass should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradTarget {
    pub weights: bool,
    pub alphas: bool,
}

impl GradTarget {
    pub const WEIGHTS: GradTarget = GradTarget {
        weights: true,
        alphas: false,
    };
    pub const ALPHAS: GradTarget = GradTarget {
        weights: false,
        alphas: true,
    };
    pub const NONE: GradTarget = GradTarget {
        weights: false,
        alphas: false,
    };
    pub const ALL: GradTarget = GradTarget {
        weights: true,
        alphas: true,
    };
}

pub(crate) fn he_normal<T: Scalar, R: Rng + ?Sized>(len: usize, fan: usize, rng: &mut R) -> Vec<T> {
    let std = (2.0 / fan as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..len).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
}

/// Bias-free convolution.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub(crate) weight: Vec<T>,
    pub(crate) grad: Vec<T>,
    shape: [usize; 4],
    geom: ConvGeom,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(weight: Vec<T>, shape: [usize; 4], geom: ConvGeom) -> Result<Self> {
        if weight.len() != shape.iter().product::<usize>() || (shape[2], shape[3]) != geom.kernel {
            return Err(Error::Shape(format!(
                "conv weight of {} values does not match shape {shape:?} / kernel {:?}",
                weight.len(),
                geom.kernel
            )));
        }
        Ok(Conv2d {
            grad: vec![T::zero(); weight.len()],
            weight,
            shape,
            geom,
            cache: None,
        })
    }

    /// He-normal initialised (fan-out).
    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, geom: ConvGeom, rng: &mut R) -> Self {
        let (kh, kw) = geom.kernel;
        let shape = [c_out, c_in, kh, kw];
        let w = he_normal(c_out * c_in * kh * kw, c_out * kh * kw, rng);
        Conv2d::new(w, shape, geom).expect("consistent shape")
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn geom(&self) -> ConvGeom {
        self.geom
    }

    pub fn weight(&self) -> &[T] {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut [T] {
        &mut self.weight
    }

    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_forward(x, &self.weight, self.shape[0], &self.geom)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.eval(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, want_dx: bool, weight_grads: bool) -> Result<Option<Tensor<T>>> {
        let x = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Consistency("conv backward called before forward".into()))?;
        let dw = if weight_grads { Some(self.grad.as_mut_slice()) } else { None };
        conv2d_backward(x.shape(), Some(x), &self.weight, self.shape[0], &self.geom, dy, want_dx, dw)
    }

    /// Reorders the input-channel axis so input position `p` reads original channel `perm[p]`.
    pub fn permute_input_channels(&mut self, perm: &[usize]) -> Result<()> {
        let [c_out, c_in, kh, kw] = self.shape;
        if perm.len() != c_in {
            return Err(Error::Shape(format!(
                "permutation of length {} applied to {c_in} input channels",
                perm.len()
            )));
        }
        let k = kh * kw;
        let mut w = vec![T::zero(); self.weight.len()];
        for o in 0..c_out {
            for (p, &c) in perm.iter().enumerate() {
                let dst = (o * c_in + p) * k;
                let src = (o * c_in + c) * k;
                w[dst..dst + k].copy_from_slice(&self.weight[src..src + k]);
            }
        }
        self.weight = w;
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

/// Per-channel batch normalization with learnable scale and shift.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub(crate) gamma: Vec<T>,
    pub(crate) beta: Vec<T>,
    pub(crate) running_mean: Vec<T>,
    pub(crate) running_var: Vec<T>,
    pub(crate) grad_gamma: Vec<T>,
    pub(crate) grad_beta: Vec<T>,
    eps: f64,
    momentum: f64,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            grad_gamma: vec![T::zero(); channels],
            grad_beta: vec![T::zero(); channels],
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad_gamma.iter_mut().for_each(|v| *v = T::zero());
        self.grad_beta.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let [n, c, _, _] = x.shape();
        if c != self.channels() {
            return Err(Error::Shape(format!(
                "batch norm over {} channels got {c}",
                self.channels()
            )));
        }
        let eps = T::from_f64_lossy(self.eps);
        let count = (n * x.plane()) as f64;
        let (mean, var, batch_stats) = match mode {
            Mode::Train { update_stats } => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for b in 0..n {
                        s += x.channel(b, ch).iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
                    }
                    let m = s / count;
                    let mut q = 0.0f64;
                    for b in 0..n {
                        q += x
                            .channel(b, ch)
                            .iter()
                            .map(|v| {
                                let d = v.to_f64().unwrap() - m;
                                d * d
                            })
                            .sum::<f64>();
                    }
                    let v = q / count;
                    mean[ch] = T::from_f64_lossy(m);
                    var[ch] = T::from_f64_lossy(v);
                    if update_stats {
                        let mo = self.momentum;
                        let unbiased = if count > 1.0 { v * count / (count - 1.0) } else { v };
                        let rm = self.running_mean[ch].to_f64().unwrap();
                        let rv = self.running_var[ch].to_f64().unwrap();
                        self.running_mean[ch] = T::from_f64_lossy((1.0 - mo) * rm + mo * m);
                        self.running_var[ch] = T::from_f64_lossy((1.0 - mo) * rv + mo * unbiased);
                    }
                }
                (mean, var, true)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone(), false),
            Mode::Linearized => (vec![T::zero(); c], vec![T::one(); c], false),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = x.clone();
        let mut y = x.clone();
        for b in 0..n {
            for ch in 0..c {
                let (m, s, g, bt) = (mean[ch], inv_std[ch], self.gamma[ch], self.beta[ch]);
                for (h, o) in xhat.channel_mut(b, ch).iter_mut().zip(y.channel_mut(b, ch)) {
                    *h = (*h - m) * s;
                    *o = g * *h + bt;
                }
            }
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            batch_stats,
        });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, weight_grads: bool) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Consistency("batch norm backward called before forward".into()))?;
        let [n, c, _, _] = dy.shape();
        let count = T::from_usize(n * dy.plane()).unwrap();
        let mut dx = dy.clone();
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for b in 0..n {
                for (&d, &h) in dy.channel(b, ch).iter().zip(cache.xhat.channel(b, ch)) {
                    sum_dy += d;
                    sum_dy_xhat += d * h;
                }
            }
            if weight_grads {
                self.grad_gamma[ch] += sum_dy_xhat;
                self.grad_beta[ch] += sum_dy;
            }
            let scale = self.gamma[ch] * cache.inv_std[ch];
            for b in 0..n {
                let xh = cache.xhat.channel(b, ch);
                for (k, v) in dx.channel_mut(b, ch).iter_mut().enumerate() {
                    *v = if cache.batch_stats {
                        scale / count * (count * *v - sum_dy - xh[k] * sum_dy_xhat)
                    } else {
                        scale * *v
                    };
                }
            }
        }
        Ok(dx)
    }

    /// Reorders every per-channel vector so position `p` holds original channel `perm[p]`.
    pub fn permute_channels(&mut self, perm: &[usize]) -> Result<()> {
        if perm.len() != self.channels() {
            return Err(Error::Shape("batch-norm permutation has the wrong length".into()));
        }
        let g = |v: &Vec<T>| perm.iter().map(|&c| v[c]).collect::<Vec<T>>();
        self.gamma = g(&self.gamma);
        self.beta = g(&self.beta);
        self.running_mean = g(&self.running_mean);
        self.running_var = g(&self.running_var);
        Ok(())
    }
}

/// Rectifier; identity under [`Mode::Linearized`].
#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward<T: Scalar>(&mut self, mut x: Tensor<T>, mode: Mode) -> Tensor<T> {
        if mode == Mode::Linearized {
            self.mask = None;
            return x;
        }
        let mask: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
        for (v, &m) in x.data_mut().iter_mut().zip(&mask) {
            if !m {
                *v = T::zero();
            }
        }
        self.mask = Some(mask);
        x
    }

    pub fn backward<T: Scalar>(&self, mut dy: Tensor<T>) -> Tensor<T> {
        if let Some(mask) = &self.mask {
            for (v, &m) in dy.data_mut().iter_mut().zip(mask) {
                if !m {
                    *v = T::zero();
                }
            }
        }
        dy
    }
}

/// 3×3 stride-2 max pooling with padding 1.
#[derive(Clone, Debug, Default)]
pub struct MaxPool {
    argmax: Vec<usize>,
    in_shape: [usize; 4],
}

impl MaxPool {
    pub fn out_size(h: usize, w: usize) -> (usize, usize) {
        ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1)
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = Self::out_size(h, w);
        let mut y = Tensor::zeros([n, c, oh, ow]);
        self.argmax = vec![0; n * c * oh * ow];
        self.in_shape = x.shape();
        let mut k = 0;
        for b in 0..n {
            for ch in 0..c {
                let src = x.channel(b, ch);
                let dst = y.channel_mut(b, ch);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut at = 0;
                        for ky in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (ox * 2 + kx) as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let i = iy as usize * w + ix as usize;
                                if src[i] > best {
                                    best = src[i];
                                    at = i;
                                }
                            }
                        }
                        dst[oy * ow + ox] = best;
                        self.argmax[k] = at;
                        k += 1;
                    }
                }
            }
        }
        y
    }

    pub fn backward<T: Scalar>(&self, dy: &Tensor<T>) -> Tensor<T> {
        let mut dx = Tensor::zeros(self.in_shape);
        let [n, c, _, _] = dy.shape();
        let plane = dy.plane();
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * plane;
                let g = dy.channel(b, ch).to_vec();
                let dst = dx.channel_mut(b, ch);
                for (k, v) in g.into_iter().enumerate() {
                    dst[self.argmax[base + k]] += v;
                }
            }
        }
        dx
    }
}

/// Fully connected layer on `[N, C]` features.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub(crate) weight: Vec<T>,
    pub(crate) bias: Vec<T>,
    pub(crate) grad_weight: Vec<T>,
    pub(crate) grad_bias: Vec<T>,
    in_features: usize,
    out_features: usize,
    cache: Option<Vec<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn init<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = (0..in_features * out_features)
            .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
            .collect();
        Linear {
            weight,
            bias: vec![T::zero(); out_features],
            grad_weight: vec![T::zero(); in_features * out_features],
            grad_bias: vec![T::zero(); out_features],
            in_features,
            out_features,
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.iter_mut().for_each(|v| *v = T::zero());
        self.grad_bias.iter_mut().for_each(|v| *v = T::zero());
    }

    /// `x` is `[N, in]` row-major; returns `[N, out]`.
    pub fn forward(&mut self, x: &[T], n: usize) -> Vec<T> {
        let mut y = vec![T::zero(); n * self.out_features];
        for b in 0..n {
            let xb = &x[b * self.in_features..(b + 1) * self.in_features];
            for o in 0..self.out_features {
                let w = &self.weight[o * self.in_features..(o + 1) * self.in_features];
                y[b * self.out_features + o] = self.bias[o] + w.iter().zip(xb).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
        self.cache = Some(x.to_vec());
        y
    }

    pub fn backward(&mut self, dy: &[T], n: usize, weight_grads: bool) -> Vec<T> {
        let x = self.cache.as_ref().expect("linear backward after forward");
        let mut dx = vec![T::zero(); n * self.in_features];
        for b in 0..n {
            let xb = &x[b * self.in_features..(b + 1) * self.in_features];
            for o in 0..self.out_features {
                let d = dy[b * self.out_features + o];
                let w = &self.weight[o * self.in_features..(o + 1) * self.in_features];
                for (k, v) in dx[b * self.in_features..(b + 1) * self.in_features].iter_mut().enumerate() {
                    *v += d * w[k];
                }
                if weight_grads {
                    self.grad_bias[o] += d;
                    let gw = &mut self.grad_weight[o * self.in_features..(o + 1) * self.in_features];
                    for (g, &xv) in gw.iter_mut().zip(xb) {
                        *g += d * xv;
                    }
                }
            }
        }
        dx
    }
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Scalar>(logits: &[T], labels: &[usize], classes: usize) -> (f64, Vec<T>) {
    let n = labels.len();
    let mut grad = vec![T::zero(); logits.len()];
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row: Vec<f64> = logits[b * classes..(b + 1) * classes]
            .iter()
            .map(|v| v.to_f64().unwrap())
            .collect();
        let p = crate::mixed::softmax_row(&row);
        loss -= p[label].max(f64::MIN_POSITIVE).ln();
        for k in 0..classes {
            let t = if k == label { 1.0 } else { 0.0 };
            grad[b * classes + k] = T::from_f64_lossy((p[k] - t) / n as f64);
        }
    }
    (loss / n as f64, grad)
}
