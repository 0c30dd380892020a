//! Plain supervised training with the step schedule, used for baseline pretraining and
//! for retraining transformed networks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Network;
use crate::error::{Error, Result};
use crate::nn::{GradTarget, Mode};
use crate::optim::{step_lr, Sgd};
use crate::synth::{derive_seed, Dataset};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Learning rate per image; the step size is this times the batch size.
    pub lr_per_image: f64,
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// 13 epochs, divided by 10 at epochs 8 and 11.
    fn default() -> Self {
        TrainConfig {
            epochs: 13,
            lr_per_image: 0.00125,
            milestones: vec![8, 11],
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::schema("train.batch_size", "must be positive"));
        }
        if !(self.lr_per_image > 0.0 && self.lr_per_image.is_finite()) {
            return Err(Error::schema("train.lr_per_image", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::schema("train.momentum", "momentum must be in [0, 1), decay non-negative"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_lr(epoch, self.lr_per_image * self.batch_size as f64, &self.milestones, self.decay_factor)
    }
}

/// Sample order for one epoch, a pure function of `(seed, stream, epoch)`.
pub fn epoch_order(len: usize, seed: u64, stream: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream, epoch as u64])));
    idx
}

/// Consecutive batches of at most `size`; a trailing remainder of one sample is merged
/// into the previous batch so normalization always sees two or more samples.
pub fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub accuracy: Option<f64>,
}

/// Runs the schedule; `eval` (if given) is scored after every epoch.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    eval: Option<&Dataset>,
) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::Config("training needs at least two samples".into()));
    }
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut total = 0.0;
        let mut seen = 0;
        for batch in batches(&epoch_order(data.len(), cfg.seed, 0x7a17, epoch), cfg.batch_size) {
            let (x, y) = data.batch::<T>(&batch);
            net.zero_grad();
            let loss = net.loss_and_grad(&x, &y, Mode::Train { update_stats: true }, GradTarget::WEIGHTS)?;
            if !loss.is_finite() {
                return Err(Error::Consistency(format!("non-finite loss in epoch {epoch}")));
            }
            sgd.step(net, lr);
            total += loss * batch.len() as f64;
            seen += batch.len();
        }
        let accuracy = eval.map(|d| evaluate(net, d, cfg.batch_size)).transpose()?;
        history.push(TrainRecord {
            epoch,
            loss: total / seen as f64,
            lr,
            accuracy,
        });
    }
    Ok(history)
}

/// Top-1 accuracy in inference mode.
pub fn evaluate<T: Scalar>(net: &mut Network<T>, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for batch in order.chunks(batch_size.max(1)) {
        let (x, y) = data.batch::<T>(batch);
        let pred = net.predict(&x)?;
        correct += pred.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_schedule() {
        let c = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert_eq!(c.lr_at(0), 0.00125);
        assert_eq!(c.lr_at(7), 0.00125);
        assert!((c.lr_at(8) - 0.000125).abs() < 1e-18);
        assert!((c.lr_at(12) - 0.0000125).abs() < 1e-18);
    }

    #[test]
    fn batching_keeps_every_sample() {
        let order: Vec<usize> = (0..65).collect();
        let b = batches(&order, 32);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].len(), 33);
        assert_eq!(b.concat(), order);
        assert_eq!(epoch_order(10, 1, 0, 3), epoch_order(10, 1, 0, 3));
        assert_ne!(epoch_order(50, 1, 0, 3), epoch_order(50, 1, 0, 4));
    }
}
