//! AdamW optimization with cosine annealing and per-epoch early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::fair_loss::LossProvider;
use crate::model::{ForwardOptions, ModelState};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_eps")]
    pub eps: f64,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
        }
    }
}

/// Moments shaped like the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor], config: AdamWConfig) -> Self {
        Self {
            config,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. Parameter `i` uses
    /// `lr · lr_scale[i]`; a scale of 0 leaves it and its moments untouched.
    /// Decay is decoupled: `p ← p·(1 − lr·λ) − lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64, lr_scale: Option<&[f64]>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let s = lr_scale.map_or(1.0, |s| s[i]);
            if s == 0.0 {
                continue;
            }
            if p.shape() != g.shape() {
                return Err(Error::InvalidArgument(format!("gradient {i} shape mismatch")));
            }
            let eta = lr * s;
            let decay = 1.0 - eta * c.weight_decay;
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gv;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gv * gv;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *pv = *pv * decay - eta * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    #[default]
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub t_max: usize,
}

impl LrSchedule {
    /// `base·(1 + cos(π·t/T))/2` for cosine, clamped to `t ≤ T`.
    pub fn lr(&self, t: usize) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.base_lr,
            ScheduleKind::Cosine => {
                if self.t_max == 0 {
                    return self.base_lr;
                }
                let t = t.min(self.t_max) as f64;
                self.base_lr * (1.0 + (std::f64::consts::PI * t / self.t_max as f64).cos()) / 2.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: ScheduleKind,
    /// Keep the epoch with the lowest validation loss when validation
    /// indices are given.
    pub early_stopping: bool,
    /// Epochs during which only the head trains.
    pub freeze_epochs: usize,
    /// Learning-rate factor for non-head parameters after unfreezing.
    pub backbone_lr_multiplier: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 10,
            schedule: ScheduleKind::Cosine,
            early_stopping: true,
            freeze_epochs: 0,
            backbone_lr_multiplier: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.backbone_lr_multiplier >= 0.0) {
            return Err(Error::Config("lr, weight_decay and backbone_lr_multiplier must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    pub log: Vec<EpochLog>,
    /// Epoch whose weights were returned.
    pub best_epoch: usize,
}

/// Loss value and parameter gradients for one batch.
pub fn loss_and_grads(state: &ModelState, data: &LabeledDataset, indices: &[usize], loss: &LossProvider) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let f = state.forward_tape(
        &mut tape,
        data.batch(indices)?,
        &ForwardOptions {
            train_params: true,
            gates: None,
        },
    )?;
    let l = loss.loss(&mut tape, f.probs, indices)?;
    let value = tape.value(l).data()[0];
    let mut g = tape.backward(l)?;
    let grads = f
        .params
        .iter()
        .zip(state.params())
        .map(|(v, p)| g.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, grads))
}

/// Loss of `state` over `indices`, evaluated in prediction-sized chunks.
pub fn dataset_loss(state: &ModelState, data: &LabeledDataset, indices: &[usize], loss: &LossProvider) -> Result<f64> {
    let preds = state.predict(data, indices)?;
    loss.value(&preds.probs, indices)
}

/// Shuffled mini-batches for `epoch`; the last batch may be short.
pub fn epoch_batches(indices: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Trains on `train_idx`. With `val_idx` and early stopping, returns the
/// weights of the epoch with the lowest validation loss.
pub fn train(
    state: &ModelState,
    data: &LabeledDataset,
    train_idx: &[usize],
    val_idx: Option<&[usize]>,
    loss: &LossProvider,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_idx.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let schedule = LrSchedule {
        kind: config.schedule,
        base_lr: config.lr,
        t_max: config.epochs,
    };
    let mut current = state.clone();
    let mut opt = OptimizerState::new(current.params(), AdamWConfig::new(config.lr, config.weight_decay));
    let is_head: Vec<bool> = current.param_names().iter().map(|n| n.starts_with("head.")).collect();
    let mut best: Option<(f64, usize, ModelState)> = None;
    let mut log = vec![];
    for epoch in 0..config.epochs {
        let lr = schedule.lr(epoch);
        let scale: Vec<f64> = is_head
            .iter()
            .map(|&h| match (h, epoch < config.freeze_epochs) {
                (true, _) => 1.0,
                (false, true) => 0.0,
                (false, false) => config.backbone_lr_multiplier,
            })
            .collect();
        let mut total = 0.0;
        for batch in epoch_batches(train_idx, config.batch_size, seed, epoch) {
            let (l, grads) = loss_and_grads(&current, data, &batch, loss)?;
            total += l;
            opt.step(current.params_mut(), &grads, lr, Some(&scale))?;
        }
        let val_loss = match val_idx {
            Some(v) if !v.is_empty() => Some(dataset_loss(&current, data, v, loss)?),
            _ => None,
        };
        log::debug!("epoch {epoch}: lr {lr:.5} train {total:.5} val {val_loss:?}");
        log.push(EpochLog {
            epoch,
            lr,
            train_loss: total,
            val_loss,
        });
        if config.early_stopping {
            if let Some(vl) = val_loss {
                if best.as_ref().is_none_or(|(b, _, _)| vl < *b) {
                    best = Some((vl, epoch, current.clone()));
                }
            }
        }
    }
    Ok(match best {
        Some((_, e, s)) => TrainOutcome {
            state: s,
            log,
            best_epoch: e,
        },
        None => TrainOutcome {
            state: current,
            log,
            best_epoch: config.epochs - 1,
        },
    })
}
