//! Learning-rate schedules and the two optimizers used by search and training.

use serde::{Deserialize, Serialize};

use crate::backbone::Network;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if step > total || total == 0 {
        return Err(Error::StepOutOfRange { step, total });
    }
    if step == 0 {
        return Ok(lr_max);
    }
    if step == total {
        return Ok(lr_min);
    }
    let t = step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Piecewise-constant decay: `lr · factor^k` where `k` counts milestones already passed.
pub fn step_lr(epoch: usize, lr: f64, milestones: &[usize], factor: f64) -> f64 {
    let k = milestones.iter().filter(|&&m| epoch >= m).count();
    lr * factor.powi(k as i32)
}

/// SGD with heavy-ball momentum and coupled weight decay.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    pub fn step(&mut self, net: &mut Network<T>, lr: f64) {
        let (mom, wd, lr) = (T::from_f64_lossy(self.momentum), T::from_f64_lossy(self.weight_decay), T::from_f64_lossy(lr));
        let mut i = 0;
        let buffers = &mut self.buffers;
        net.for_each_weight(&mut |w, g| {
            if buffers.len() <= i {
                buffers.push(vec![T::zero(); w.len()]);
            }
            let buf = &mut buffers[i];
            for ((w, &g), b) in w.iter_mut().zip(g).zip(buf.iter_mut()) {
                let d = g + wd * *w;
                *b = mom * *b + d;
                *w -= lr * *b;
            }
            i += 1;
        });
    }

    /// Momentum buffers in visiting order (empty before the first step).
    pub fn buffers(&self) -> &[Vec<T>] {
        &self.buffers
    }

    pub fn set_buffers(&mut self, buffers: Vec<Vec<T>>) {
        self.buffers = buffers;
    }
}

/// Adam on the architecture parameters, with L2-style weight decay added to the gradient.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, betas: (f64, f64)) -> Self {
        Adam {
            lr,
            weight_decay,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<T: Scalar>(&mut self, net: &mut Network<T>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut i = 0;
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        let (lr, wd, b1, b2, eps) = (self.lr, self.weight_decay, self.beta1, self.beta2, self.eps);
        net.for_each_alpha(&mut |a, g| {
            if m_all.len() <= i {
                m_all.push(vec![0.0; a.len()]);
                v_all.push(vec![0.0; a.len()]);
            }
            let (m, v) = (&mut m_all[i], &mut v_all[i]);
            for k in 0..a.len() {
                let grad = g[k] + wd * a[k];
                m[k] = b1 * m[k] + (1.0 - b1) * grad;
                v[k] = b2 * v[k] + (1.0 - b2) * grad * grad;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                a[k] -= lr * mh / (vh.sqrt() + eps);
            }
            i += 1;
        });
    }
}
