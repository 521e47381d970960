//! Multinomial logistic regression and its mini-batch trainer.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logit given to the only class seen in a single-class training set.
pub const CONSTANT_LOGIT: f64 = 30.0;

/// Row-major design matrix with integer class targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub dim: usize,
    pub x: Vec<f64>,
    pub y: Vec<u8>,
}

impl Batch {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            x: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn push(&mut self, features: &[f64], label: u8) {
        debug_assert_eq!(features.len(), self.dim);
        self.x.extend_from_slice(features);
        self.y.push(label);
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn extend(&mut self, other: &Batch) {
        self.x.extend_from_slice(&other.x);
        self.y.extend_from_slice(&other.y);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxLinear {
    pub n_classes: usize,
    pub dim: usize,
    /// `n_classes x dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl SoftmaxLinear {
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        Self {
            n_classes,
            dim,
            weights: vec![0.0; n_classes * dim],
            bias: vec![0.0; n_classes],
        }
    }

    /// Predicts `class` for every input.
    pub fn constant(n_classes: usize, dim: usize, class: u8) -> Self {
        let mut m = Self::zeros(n_classes, dim);
        m.bias[class as usize] = CONSTANT_LOGIT;
        m
    }

    pub fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let w = &self.weights[k * self.dim..(k + 1) * self.dim];
            *o = self.bias[k] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.n_classes];
        self.logits_into(x, &mut z);
        softmax_in_place(&mut z);
        z
    }

    /// Argmax of the logits; ties resolve to the smaller class index.
    pub fn predict(&self, x: &[f64]) -> u8 {
        let mut z = vec![0.0; self.n_classes];
        self.logits_into(x, &mut z);
        argmax(&z) as u8
    }

    /// Mean cross-entropy over `batch`.
    pub fn loss(&self, batch: &Batch) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let mut z = vec![0.0; self.n_classes];
        let mut total = 0.0;
        for i in 0..batch.len() {
            self.logits_into(batch.row(i), &mut z);
            total += log_sum_exp(&z) - z[batch.y[i] as usize];
        }
        total / batch.len() as f64
    }

    /// Mean cross-entropy and its gradient with respect to weights and bias.
    pub fn loss_and_grad(&self, batch: &Batch) -> (f64, Gradient) {
        let mut g = Gradient {
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.n_classes],
        };
        if batch.is_empty() {
            return (0.0, g);
        }
        let mut z = vec![0.0; self.n_classes];
        let mut total = 0.0;
        for i in 0..batch.len() {
            let x = batch.row(i);
            let y = batch.y[i] as usize;
            self.logits_into(x, &mut z);
            total += log_sum_exp(&z) - z[y];
            softmax_in_place(&mut z);
            z[y] -= 1.0;
            for (k, &dk) in z.iter().enumerate() {
                g.bias[k] += dk;
                let gw = &mut g.weights[k * self.dim..(k + 1) * self.dim];
                for (gj, xj) in gw.iter_mut().zip(x) {
                    *gj += dk * xj;
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        g.weights.iter_mut().for_each(|v| *v *= inv);
        g.bias.iter_mut().for_each(|v| *v *= inv);
        (total * inv, g)
    }

    pub fn step(&mut self, g: &Gradient, lr: f64) {
        for (w, d) in self.weights.iter_mut().zip(&g.weights) {
            *w -= lr * d;
        }
        for (b, d) in self.bias.iter_mut().zip(&g.bias) {
            *b -= lr * d;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = k;
        }
    }
    best
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Validation improvement below this does not reset patience.
    pub min_delta: f64,
    /// Steps per epoch for crop-sampled pixel training.
    pub epoch_steps: usize,
    /// Upper bound on validation pixels scored per epoch (pixel models).
    pub val_pixel_cap: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            max_epochs: 500,
            early_stop_patience: 30,
            min_delta: 1e-6,
            epoch_steps: 500,
            val_pixel_cap: 65_536,
            optimizer: Optimizer::Sgd,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate {} must be > 0",
                self.learning_rate
            )));
        }
        if self.early_stop_patience < 1
            || self.batch_size < 1
            || self.max_epochs < 1
            || self.epoch_steps < 1
        {
            return Err(Error::Config(
                "early_stop_patience, batch_size, max_epochs and epoch_steps must be at least 1"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub warning: Option<String>,
}

impl TrainingLog {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.epochs.iter().map(|e| e.val_loss).reduce(f64::min)
    }

    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch log serializes") + "\n")
            .collect()
    }
}

/// Supplies training mini-batches; `None` skips the step.
pub trait BatchSource {
    fn steps_per_epoch(&self) -> usize;
    fn batch(&mut self, epoch: usize, step: usize) -> Result<Option<Batch>>;
}

/// Mini-batch gradient descent with validation-loss model selection and
/// early stopping.
///
/// The returned model is the one with the lowest validation loss seen.
/// Patience counts epochs whose loss did not beat the best by `min_delta`.
/// When `train_classes` holds a single class the trainer returns a constant
/// predictor and records a warning instead of optimizing.
pub fn fit_softmax(
    n_classes: usize,
    dim: usize,
    train_classes: &[u8],
    source: &mut dyn BatchSource,
    val: &Batch,
    cfg: &TrainConfig,
) -> Result<(SoftmaxLinear, TrainingLog)> {
    cfg.validate()?;
    if train_classes.is_empty() || val.is_empty() {
        return Err(Error::InsufficientScenes {
            needed: 1,
            available: 0,
        });
    }
    let mut log = TrainingLog::default();
    if train_classes.len() == 1 {
        let model = SoftmaxLinear::constant(n_classes, dim, train_classes[0]);
        log.epochs.push(EpochLog {
            epoch: 1,
            train_loss: 0.0,
            val_loss: model.loss(val),
            wall_seconds: 0.0,
        });
        log.best_epoch = 1;
        log.warning = Some(format!(
            "single-class training set (class {}); returning constant predictor",
            train_classes[0]
        ));
        log::warn!("{}", log.warning.as_deref().unwrap_or_default());
        return Ok((model, log));
    }

    let mut model = SoftmaxLinear::zeros(n_classes, dim);
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut reference = f64::INFINITY;
    let mut wait = 0;
    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for step in 0..source.steps_per_epoch() {
            let Some(batch) = source.batch(epoch, step)? else {
                continue;
            };
            if batch.is_empty() {
                continue;
            }
            let (loss, grad) = model.loss_and_grad(&batch);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            model.step(&grad, cfg.learning_rate);
            loss_sum += loss;
            n_batches += 1;
        }
        let val_loss = model.loss(val);
        if !val_loss.is_finite() || !model.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss: if n_batches == 0 {
                0.0
            } else {
                loss_sum / n_batches as f64
            },
            val_loss,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if val_loss < best_loss {
            best_loss = val_loss;
            best = model.clone();
            log.best_epoch = epoch;
        }
        if val_loss < reference - cfg.min_delta {
            reference = val_loss;
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.early_stop_patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    Ok((best, log))
}

/// Shuffled fixed-size mini-batches over an in-memory design matrix.
pub struct ShuffledBatches<'a> {
    pub data: &'a Batch,
    pub batch_size: usize,
    pub seed: u64,
    order: Vec<usize>,
    order_epoch: usize,
}

impl<'a> ShuffledBatches<'a> {
    pub fn new(data: &'a Batch, batch_size: usize, seed: u64) -> Self {
        Self {
            data,
            batch_size,
            seed,
            order: Vec::new(),
            order_epoch: 0,
        }
    }
}

impl BatchSource for ShuffledBatches<'_> {
    fn steps_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.batch_size)
    }

    fn batch(&mut self, epoch: usize, step: usize) -> Result<Option<Batch>> {
        use rand::seq::SliceRandom;
        if self.order_epoch != epoch || self.order.is_empty() {
            self.order = (0..self.data.len()).collect();
            let mut rng = crate::rng::StreamKey::new(self.seed)
                .with_str("minibatch")
                .with_u64(epoch as u64)
                .rng();
            self.order.shuffle(&mut rng);
            self.order_epoch = epoch;
        }
        let lo = step * self.batch_size;
        let hi = (lo + self.batch_size).min(self.order.len());
        let mut b = Batch::new(self.data.dim);
        for &i in &self.order[lo..hi] {
            b.push(self.data.row(i), self.data.y[i]);
        }
        Ok(Some(b))
    }
}
