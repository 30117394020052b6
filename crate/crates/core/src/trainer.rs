//! Post-pruning training with a fixed mask.
//!
//! Gradients and weight decay are multiplied by the mask before each update,
//! so pruned entries start at zero and stay exactly zero.

use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, RetainPolicy, Var};
use crate::data::{augment_images, Dataset, Sampler, SamplerConfig, SamplerMode};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::nn::{ModelState, Network, Objective};
use crate::pruning::mask::Mask;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs (0-based) at whose start the learning rate is divided by `lr_drop_factor`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Random crop (4-pixel padding) and horizontal flip for image inputs.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 256,
            lr: 0.1,
            lr_drop_epochs: vec![100, 150],
            lr_drop_factor: 10.0,
            weight_decay: 5e-4,
            momentum: 0.0,
            augment: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.lr));
        }
        if !(self.lr_drop_factor >= 1.0) {
            return bad(format!("learning-rate drop factor must be >= 1, got {}", self.lr_drop_factor));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("weight decay must be >= 0 and momentum in [0, 1)".into());
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("learning-rate drop epochs must increase: {:?}", self.lr_drop_epochs));
        }
        if let Some(&e) = self.lr_drop_epochs.iter().find(|&&e| e >= self.epochs) {
            return bad(format!("learning-rate drop at epoch {e} is past the last epoch {}", self.epochs - 1));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr / self.lr_drop_factor.powi(drops as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub final_accuracy: f64,
    pub wall_seconds: f64,
}

/// Fraction of `data` classified correctly (ties go to the lower class).
pub fn evaluate(net: &Network, state: &ModelState, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty dataset".into()));
    }
    const CHUNK: usize = 500;
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(CHUNK) {
        let batch = data.batch(chunk);
        let logits = net.logits(state, &batch.inputs)?;
        let classes = logits.shape()[1];
        for (row, &label) in logits.data().chunks(classes).zip(&batch.labels) {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            correct += usize::from(best == label);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains `mask ⊙ state` with SGD and returns the final parameters.
pub fn train_pruned(
    net: &Network,
    state: &ModelState,
    mask: &Mask,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelState, RunMetrics)> {
    cfg.validate()?;
    let started = Instant::now();
    let multipliers = mask.param_multipliers(state)?;
    let mut values = mask.apply(state)?.tensors();
    let mut velocity: Vec<Tensor> = values.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut sampler = Sampler::new(
        train,
        SamplerConfig { batch_size: cfg.batch_size, mode: SamplerMode::Shuffled, seed: cfg.seed },
    )?;
    let mut aug_rng = stream(cfg.seed, Stream::Augment);
    let augment = cfg.augment && train.sample_shape().len() == 3;
    let steps_per_epoch = (train.len() / sampler.batch_size()).max(1);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut loss_sum = 0.0;
        for step in 0..steps_per_epoch {
            let mut batch = sampler.next_batch();
            if augment {
                batch = augment_images(&batch, 4, &mut aug_rng);
            }
            let mut g = Graph::new(RetainPolicy::Release);
            let params: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let loss = net.loss(&mut g, &params, &batch);
            let loss = match loss {
                Ok(l) if g.value(l)?.item().is_finite() => l,
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    return Err(Error::NonFiniteLoss { step: epoch * steps_per_epoch + step })
                }
                Err(e) => return Err(e),
            };
            loss_sum += g.value(loss)?.item();
            let grads = g.backward(loss, &params)?.into_tensors();
            for (((w, d), m), v) in values.iter_mut().zip(grads).zip(&multipliers).zip(velocity.iter_mut()) {
                for (((wi, &di), &mi), vi) in
                    w.data_mut().iter_mut().zip(d.data()).zip(m.data()).zip(v.data_mut().iter_mut())
                {
                    let delta = (di + cfg.weight_decay * *wi) * mi;
                    *vi = cfg.momentum * *vi + delta;
                    *wi -= lr * *vi;
                }
            }
        }
        let trained = state.with_values(values.clone());
        let test_accuracy = evaluate(net, &trained, test)?;
        let train_loss = loss_sum / steps_per_epoch as f64;
        info!("epoch {epoch}: lr {lr:.4} train loss {train_loss:.4} test acc {test_accuracy:.4}");
        epochs.push(EpochMetrics { epoch, lr, train_loss, test_accuracy });
    }
    let final_accuracy = epochs.last().map(|e| e.test_accuracy).unwrap_or(0.0);
    Ok((
        state.with_values(values),
        RunMetrics { epochs, final_accuracy, wall_seconds: started.elapsed().as_secs_f64() },
    ))
}
