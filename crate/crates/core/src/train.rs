//! Adam, the dev-loss plateau schedule and the epoch loop.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dataset::{make_batches, Augmentation, Batch, Batches, FeatureSet};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::Model;
use crate::param::ParamStore;

/// Adam with bias correction. Moments are indexed like the store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.second[index]
    }

    /// One update of every trainable parameter from its accumulated
    /// gradient. A non-finite gradient aborts before anything changes.
    pub fn step(&mut self, store: &mut ParamStore, batch: u64) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, model has {}",
                self.first.len(),
                store.len()
            )));
        }
        if let Some(p) = store.iter().find(|p| p.trainable && !p.grad.is_finite()) {
            return Err(Error::NonFiniteGradient { param: p.name.clone(), batch });
        }
        self.step += 1;
        let t = self.step as i32;
        let correct1 = 1.0 - self.beta1.powi(t);
        let correct2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / correct1;
                let v_hat = v[i] / correct2;
                value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Cuts the rate to 60% when dev loss fails to drop by 5% against the
/// previous epoch, at most once every two epochs and never below 1e-5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrScheduler {
    pub lr: f64,
    pub prev_dev_loss: Option<f64>,
    /// Completed epochs trained at `lr`.
    pub epochs_at_current_lr: usize,
    pub floor: f64,
    pub decay: f64,
    pub significance: f64,
    pub min_dwell: usize,
}

impl LrScheduler {
    pub fn new(lr: f64) -> Self {
        Self::with_state(lr, None, 0)
    }

    pub fn with_state(lr: f64, prev_dev_loss: Option<f64>, epochs_at_current_lr: usize) -> Self {
        Self {
            lr: lr.max(1e-5),
            prev_dev_loss,
            epochs_at_current_lr,
            floor: 1e-5,
            decay: 0.6,
            significance: 0.05,
            min_dwell: 2,
        }
    }

    /// Call once per epoch with that epoch's dev loss; returns the rate for
    /// the next epoch.
    pub fn update(&mut self, dev_loss: f64) -> f64 {
        self.epochs_at_current_lr += 1;
        let stalled = match self.prev_dev_loss {
            Some(prev) => !dev_loss.is_finite() || dev_loss > (1.0 - self.significance) * prev,
            None => !dev_loss.is_finite(),
        };
        if stalled && self.prev_dev_loss.is_some() && self.epochs_at_current_lr >= self.min_dwell {
            self.lr = (self.decay * self.lr).max(self.floor);
            self.epochs_at_current_lr = 0;
        }
        if dev_loss.is_finite() {
            self.prev_dev_loss = Some(dev_loss);
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { variant: "ST-AttNet4".into(), epochs: 80, batch_size: 100, initial_lr: 1e-3, seed: 0, augment: false }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.initial_lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub dev_loss: f64,
    pub dev_accuracy: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    Completed,
    /// Training hit a NaN loss or gradient; the best earlier model is kept.
    Diverged(String),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The best model on dev, or the initial one if no epoch finished.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stop: StopReason,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,train_accuracy,dev_loss,dev_accuracy,lr\n");
    for r in history {
        out.push_str(&format!(
            "{},{:.8},{:.6},{:.8},{:.6},{:.8e}\n",
            r.epoch, r.train_loss, r.train_accuracy, r.dev_loss, r.dev_accuracy, r.lr
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Mean loss over the batch.
    pub loss: f64,
    pub correct: usize,
    pub examples: usize,
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0
}

fn count_correct(logits: &crate::tensor::Tensor, labels: &[usize]) -> usize {
    let k = logits.last_dim();
    labels.iter().enumerate().filter(|&(i, &l)| argmax(&logits.data()[i * k..(i + 1) * k]) == l).count()
}

/// One optimizer step: zero gradients, forward in training mode, backward,
/// commit batch-norm statistics, Adam update.
pub fn train_step(model: &mut Model, adam: &mut AdamState, batch: &Batch, batch_id: u64) -> Result<StepStats> {
    model.store_mut().zero_grad();
    let mut g = Graph::new();
    let x = g.input(batch.inputs.clone());
    let out = model.forward(&mut g, x, Mode::Train)?;
    let loss = g.softmax_cross_entropy(out.logits, &batch.labels)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Diverged(format!("loss {value} at batch {batch_id}")));
    }
    let correct = count_correct(g.value(out.logits), &batch.labels);
    g.backward(loss, model.store_mut())?;
    adam.step(model.store_mut(), batch_id)?;
    g.commit_running_stats(model.store_mut());
    Ok(StepStats { loss: value, correct, examples: batch.labels.len() })
}

/// Mean loss and accuracy in inference mode.
pub fn evaluate_loss(model: &Model, set: &FeatureSet, batch_size: usize) -> Result<(f64, f64)> {
    let mut total = 0.0;
    let mut correct = 0;
    for batch in Batches::sequential(set, batch_size)? {
        let batch = batch?;
        let mut g = Graph::new();
        let x = g.input(batch.inputs);
        let out = model.forward(&mut g, x, Mode::Infer)?;
        let loss = g.softmax_cross_entropy(out.logits, &batch.labels)?;
        total += g.value(loss).data()[0] * batch.labels.len() as f64;
        correct += count_correct(g.value(out.logits), &batch.labels);
    }
    Ok((total / set.len() as f64, correct as f64 / set.len() as f64))
}

pub fn fit(model: Model, train: &FeatureSet, dev: &FeatureSet, config: &TrainConfig) -> Result<TrainOutcome> {
    fit_with(model, train, dev, config, None, |_| {})
}

/// The full loop. `on_epoch` sees each record as it is produced.
pub fn fit_with(
    mut model: Model,
    train: &FeatureSet,
    dev: &FeatureSet,
    config: &TrainConfig,
    augmentation: Option<&Augmentation>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut best = model.clone();
    let mut best_key: Option<(f64, f64)> = None;
    let mut best_epoch = None;
    let mut history = Vec::new();
    if config.epochs == 0 {
        return Ok(TrainOutcome { model: best, history, best_epoch, stop: StopReason::Completed });
    }
    let mut adam = AdamState::new(model.store(), config.initial_lr);
    let mut scheduler = LrScheduler::new(config.initial_lr);
    let mut batch_id = 0u64;
    for epoch in 1..=config.epochs {
        let lr = scheduler.lr;
        adam.lr = lr;
        let mut batches = make_batches(train, config.batch_size, config.seed, epoch as u64)?;
        if let Some(aug) = augmentation {
            batches = batches.with_augmentation(aug, config.seed, epoch as u64)?;
        }
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        for batch in batches {
            let batch = batch?;
            match train_step(&mut model, &mut adam, &batch, batch_id) {
                Ok(s) => {
                    loss_sum += s.loss * s.examples as f64;
                    correct += s.correct;
                    seen += s.examples;
                }
                Err(e @ (Error::Diverged(_) | Error::NonFiniteGradient { .. })) => {
                    log::warn!("stopping at epoch {epoch}: {e}");
                    return Ok(TrainOutcome {
                        model: best,
                        history,
                        best_epoch,
                        stop: StopReason::Diverged(e.to_string()),
                    });
                }
                Err(e) => return Err(e),
            }
            batch_id += 1;
        }
        let (dev_loss, dev_accuracy) = evaluate_loss(&model, dev, config.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            dev_loss,
            dev_accuracy,
            lr,
        };
        let improved = match best_key {
            None => true,
            Some((acc, loss)) => dev_accuracy > acc || (dev_accuracy == acc && dev_loss < loss),
        };
        if improved && dev_loss.is_finite() {
            best = model.clone();
            best_key = Some((dev_accuracy, dev_loss));
            best_epoch = Some(epoch);
        }
        scheduler.update(dev_loss);
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome { model: best, history, best_epoch, stop: StopReason::Completed })
}
