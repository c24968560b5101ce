//! Training loop: Adam with coupled weight decay, early stopping on
//! validation error, and evaluation metrics.

use std::collections::HashMap;
use std::time::Instant;

use thiserror::Error;

use crate::data::{WindowSet, WindowedDataset};
use crate::model::{ModelError, NagaModel};
use crate::rng::Rng;
use crate::tape::{GradTape, Gradients, TapeError};
use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Optimizer and schedule settings. The defaults are the tuned values
/// used throughout the benchmark runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving validation epochs before stopping.
    pub patience: usize,
    /// A validation drop must exceed this to count as improvement.
    pub min_delta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 0.003581,
            weight_decay: 1e-4,
            batch_size: 64,
            max_epochs: 100,
            patience: 5,
            min_delta: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("lr {} must be positive", self.lr)));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::InvalidConfig("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::InvalidConfig(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        if self.patience == 0 {
            return Err(TrainError::InvalidConfig("patience must be positive".into()));
        }
        if self.min_delta < 0.0 {
            return Err(TrainError::InvalidConfig("min_delta must be non-negative".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::InvalidConfig(format!("{name} {b} outside [0,1)")));
            }
        }
        if self.adam_eps <= 0.0 || !self.adam_eps.is_finite() {
            return Err(TrainError::InvalidConfig("adam_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Training objective for one batch: squared errors summed across the
/// horizon, averaged over the batch.
pub fn batch_loss(pred: &Tensor, target: &Tensor) -> Result<f64, ShapeError> {
    if pred.shape() != target.shape() || pred.rank() != 2 {
        return Err(ShapeError::Mismatch {
            op: "batch_loss",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let b = pred.shape()[0];
    let mut total = 0.0;
    for (p, t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        total += d * d;
    }
    Ok(total / b as f64)
}

/// Error metrics averaged over every prediction element, so MSE here is
/// the training objective further divided by the horizon length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
}

pub fn metrics(pred: &Tensor, target: &Tensor) -> Result<Metrics, ShapeError> {
    if pred.shape() != target.shape() {
        return Err(ShapeError::Mismatch {
            op: "metrics",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let n = pred.len().max(1);
    let mut sq = 0.0;
    let mut abs = 0.0;
    for (p, t) in pred.data().iter().zip(target.data()) {
        let d = p - t;
        sq += d * d;
        abs += d.abs();
    }
    let mse = sq / n as f64;
    Ok(Metrics {
        mse,
        mae: abs / n as f64,
        rmse: mse.sqrt(),
    })
}

/// Adam moment buffers, keyed by parameter name. Weight decay is folded
/// into the gradient before the moment updates (coupled decay).
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

fn adam_update_tensor(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    step: u64,
    cfg: &TrainConfig,
) {
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad.data()[i] + cfg.weight_decay * param.data()[i];
        let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * g * g;
        m.data_mut()[i] = mi;
        v.data_mut()[i] = vi;
        let m_hat = mi / c1;
        let v_hat = vi / c2;
        param.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState::default()
    }

    /// One optimizer step over all model parameters. Each parameter's
    /// update depends only on its own buffers, so map order is
    /// irrelevant to the result.
    pub fn step(
        &mut self,
        model: &mut NagaModel,
        grads: &Gradients,
        cfg: &TrainConfig,
    ) -> Result<(), TrainError> {
        self.step += 1;
        let step = self.step;
        let mut err: Option<TrainError> = None;
        model.visit_params_mut(&mut |name, param| {
            if err.is_some() {
                return;
            }
            let grad = match grads.get(name) {
                Ok(g) => g,
                Err(e) => {
                    err = Some(e.into());
                    return;
                }
            };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
            adam_update_tensor(param, grad, m, v, step, cfg);
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    NoImprovement,
    Stop,
}

/// Tracks the best validation value and how long since it improved by
/// more than `min_delta`.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    best: f64,
    streak: usize,
    patience: usize,
    min_delta: f64,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_delta: f64) -> EarlyStopper {
        EarlyStopper {
            best: f64::INFINITY,
            streak: 0,
            patience,
            min_delta,
        }
    }

    pub fn observe(&mut self, val: f64) -> StopSignal {
        if self.best - val > self.min_delta {
            self.best = val;
            self.streak = 0;
            StopSignal::Improved
        } else {
            self.streak += 1;
            if self.streak >= self.patience {
                StopSignal::Stop
            } else {
                StopSignal::NoImprovement
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Per-epoch training loss (batch objective weighted by batch size).
    pub train_loss: Vec<f64>,
    /// Per-epoch validation MSE (per-element).
    pub val_mse: Vec<f64>,
    /// Number of epochs actually run (1-based count).
    pub stop_epoch: usize,
    /// Epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub wall_seconds: f64,
    pub test: Metrics,
    pub param_count: usize,
}

/// Predictions for a whole window set in eval mode (no masking, no
/// dropout), stacked into `n * horizon`.
pub fn predict_set(model: &NagaModel, set: &WindowSet) -> Result<Tensor, TrainError> {
    let h = set.ys.first().map_or(0, |y| y.len());
    let mut pred = Tensor::zeros(&[set.len().max(1), h.max(1)]);
    let masks = model.eval_masks();
    for (i, x) in set.xs.iter().enumerate() {
        let p = model.forward_window(x, &masks)?;
        pred.row_mut(i).copy_from_slice(p.row(0));
    }
    Ok(pred)
}

pub fn evaluate(model: &NagaModel, set: &WindowSet) -> Result<Metrics, TrainError> {
    let pred = predict_set(model, set)?;
    Ok(metrics(&pred, &set.target_matrix())?)
}

fn gather_batch(set: &WindowSet, idx: &[usize]) -> (Vec<usize>, Tensor) {
    let h = set.ys[idx[0]].len();
    let mut targets = Tensor::zeros(&[idx.len(), h]);
    for (row, &i) in idx.iter().enumerate() {
        targets.row_mut(row).copy_from_slice(set.ys[i].data());
    }
    (idx.to_vec(), targets)
}

/// Fits the model and restores the weights of the best validation
/// epoch. The run is fully determined by the model's initial state,
/// the dataset, and `cfg.seed`.
pub fn train(
    model: &mut NagaModel,
    data: &WindowedDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(TrainError::InvalidConfig(
            "train and val splits must contain windows".into(),
        ));
    }
    let start = Instant::now();
    // Separate substreams keep shuffling and mask draws decoupled, so
    // e.g. turning masking off does not reorder the batches.
    let master = Rng::new(cfg.seed);
    let mut shuffle_rng = master.fork(1);
    let mut mask_rng = master.fork(2);

    let mut adam = AdamState::new();
    let mut stopper = EarlyStopper::new(cfg.patience, cfg.min_delta);
    let mut best_params = model.params_vec();
    let mut best_epoch = 0usize;
    let mut train_loss = Vec::new();
    let mut val_mse = Vec::new();
    let mut stop_epoch = 0usize;

    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.max_epochs {
        stop_epoch = epoch;
        shuffle_rng.shuffle(&mut order);
        let mut epoch_sq_total = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (idx, targets) = gather_batch(&data.train, chunk);
            let windows: Vec<&Tensor> = idx.iter().map(|&i| &data.train.xs[i]).collect();
            let masks: Vec<_> = idx
                .iter()
                .map(|_| model.sample_masks(data.lookback, &mut mask_rng))
                .collect();
            let mut tape = GradTape::new();
            let vars = model.register_params(&mut tape)?;
            let loss_var = model.build_batch_loss(&mut tape, &vars, &windows, &targets, &masks)?;
            let loss = tape.value(loss_var).item();
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            epoch_sq_total += loss * chunk.len() as f64;
            let grads = tape.backward(loss_var)?;
            adam.step(model, &grads, cfg)?;
        }
        train_loss.push(epoch_sq_total / n as f64);

        let val = evaluate(model, &data.val)?;
        val_mse.push(val.mse);
        match stopper.observe(val.mse) {
            StopSignal::Improved => {
                best_params = model.params_vec();
                best_epoch = epoch;
            }
            StopSignal::NoImprovement => {}
            StopSignal::Stop => break,
        }
    }

    model.set_params_vec(&best_params)?;
    let test = evaluate(model, &data.test)?;
    Ok(TrainReport {
        train_loss,
        val_mse,
        stop_epoch,
        best_epoch,
        best_val_mse: stopper.best(),
        wall_seconds: start.elapsed().as_secs_f64(),
        test,
        param_count: model.param_count(),
    })
}
