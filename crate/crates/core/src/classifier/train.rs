use std::io::Write;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmax, BranchMode, HeadMode, ModelParams, PreparedSample};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Parameters;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// 0-based epochs at whose start the rate is multiplied by the factor.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub seed: u64,
    pub branch_mode: BranchMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            lr: 1e-3,
            lr_decay_epochs: vec![60, 110],
            lr_decay_factor: 0.1,
            batch_size: 16,
            dropout: 0.5,
            seed: 0,
            branch_mode: BranchMode::Dual,
        }
    }
}

impl TrainConfig {
    /// A zero rate is accepted: it freezes the parameters.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::Config("train.lr_decay_factor must be positive".into()));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("train.lr_decay_epochs must be strictly increasing".into()));
        }
        if let Some(&last) = self.lr_decay_epochs.last() {
            if last >= self.epochs {
                return Err(Error::Config(format!(
                    "train.lr_decay_epochs entry {last} is not below train.epochs = {}",
                    self.epochs
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("train.dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Learning rate used throughout 0-based `epoch`.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    let decays = config.lr_decay_epochs.iter().filter(|&&d| epoch >= d).count();
    config.lr * config.lr_decay_factor.powi(decays as i32)
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer state does not match the parameters");
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_top1,test_top1,lr";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Sample-weighted mean loss of the training-mode passes.
    pub train_loss: f64,
    /// Accuracy of the training-mode predictions made during the epoch.
    pub train_top1: f64,
    /// Eval-mode accuracy after the epoch; NaN without a test split.
    pub test_top1: f64,
    pub lr: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.train_loss, self.train_top1, self.test_top1, self.lr
        )
    }
}

/// Everything needed to continue training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: ModelParams,
    pub adam: Adam,
    /// Shuffling stream.
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: ModelParams, seed: u64) -> Self {
        let adam = Adam::new(model.num_params());
        TrainState {
            model,
            adam,
            rng: rng_for(seed, &[0x5eed]),
            epoch: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<EpochMetrics>,
}

/// Runs epochs `state.epoch..config.epochs`, calling `on_epoch` after each.
pub fn train(
    mut state: TrainState,
    train_set: &[PreparedSample],
    test_set: &[PreparedSample],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    state.model.validate()?;
    if train_set.is_empty() {
        return Err(Error::Validation("the train split is empty".into()));
    }
    let mut metrics = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let lr = lr_at(config, epoch);
        order.sort_unstable();
        order.shuffle(&mut state.rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mode = HeadMode::Train {
                dropout: state.model.dropout,
                dropout_seed: derive_seed(config.seed, &[epoch as u64, b as u64]),
            };
            let out = state.model.run_batch(&batch, mode, true, false)?;
            let grads = out.grads.as_ref().expect("backward requested");
            let finite_grads = {
                let mut ok = true;
                grads.visit(&mut |_, _, v| ok &= v.iter().all(|g| g.is_finite()));
                ok
            };
            if !out.loss.is_finite() || !finite_grads {
                let ids: Vec<usize> = batch.iter().map(|s| s.id).collect();
                return Err(Error::Numerical(format!(
                    "non-finite {} in epoch {epoch}, batch {b} (sample ids {ids:?})",
                    if out.loss.is_finite() { "gradient" } else { "loss" }
                )));
            }
            loss_sum += out.loss * batch.len() as f64;
            for (row, s) in out.log_probs.outer_iter().zip(&batch) {
                correct += usize::from(argmax(row.as_slice().unwrap()) == s.label);
            }
            state.model.head.update_running_stats(&out.head_cache);
            let mut flat = state.model.flatten();
            state.adam.update(&mut flat, &grads.flatten(), lr);
            state.model.assign(&flat);
        }
        let test_top1 = if test_set.is_empty() {
            f64::NAN
        } else {
            evaluate(&state.model, test_set)?.top1
        };
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_top1: correct as f64 / train_set.len() as f64,
            test_top1,
            lr,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train {:.3} test {:.3} lr {lr:e}",
            m.train_loss,
            m.train_top1,
            m.test_top1
        );
        on_epoch(&m);
        metrics.push(m);
        state.epoch += 1;
    }
    Ok(TrainOutcome { state, metrics })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePrediction {
    pub id: usize,
    pub label: usize,
    pub predicted: usize,
    pub log_probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub top1: f64,
    /// Defined for five or more classes.
    pub top5: Option<f64>,
    /// `confusion[label][predicted]`
    pub confusion: Vec<Vec<u64>>,
    pub predictions: Vec<SamplePrediction>,
}

impl EvalMetrics {
    pub fn write_confusion_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        let n = self.confusion.len();
        let header: Vec<String> = (0..n).map(|c| format!("pred_{c}")).collect();
        writeln!(out, "label,{}", header.join(","))?;
        for (label, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(out, "{label},{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn write_predictions_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "sample_id,label,predicted,log_prob_label")?;
        for p in &self.predictions {
            writeln!(out, "{},{},{},{}", p.id, p.label, p.predicted, p.log_probs[p.label])?;
        }
        Ok(())
    }
}

/// Eval-mode metrics; every sample is scored on its own, so results do not
/// depend on how samples are grouped.
pub fn evaluate(model: &ModelParams, samples: &[PreparedSample]) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty split".into()));
    }
    let classes = model.num_classes();
    let predictions: Vec<SamplePrediction> = samples
        .par_iter()
        .map(|s| {
            let log_probs = model.predict(s)?;
            Ok(SamplePrediction {
                id: s.id,
                label: s.label,
                predicted: argmax(&log_probs),
                log_probs,
            })
        })
        .collect::<Result<_>>()?;
    let mut confusion = vec![vec![0u64; classes]; classes];
    let mut top1 = 0usize;
    let mut top5 = 0usize;
    for p in &predictions {
        confusion[p.label][p.predicted] += 1;
        top1 += usize::from(p.predicted == p.label);
        // Rank of the true class: entries strictly better, ties to lower index.
        let target = p.log_probs[p.label];
        let rank = p
            .log_probs
            .iter()
            .enumerate()
            .filter(|&(c, &v)| v > target || (v == target && c < p.label))
            .count();
        top5 += usize::from(rank < 5);
    }
    let n = predictions.len() as f64;
    Ok(EvalMetrics {
        top1: top1 as f64 / n,
        top5: (classes >= 5).then(|| top5 as f64 / n),
        confusion,
        predictions,
    })
}

/// One CSV row per sample: id, label and the eval-mode concatenated
/// read-out, after a header row.
pub fn write_embeddings(model: &ModelParams, samples: &[PreparedSample], mut out: impl Write) -> Result<()> {
    let rows: Vec<Vec<f64>> = samples.par_iter().map(|s| model.embed(s)).collect::<Result<_>>()?;
    let io = |e| Error::io("<embeddings>", e);
    let dims: Vec<String> = (0..model.embedding_dim()).map(|i| format!("e{i}")).collect();
    writeln!(out, "sample_id,label,{}", dims.join(",")).map_err(io)?;
    for (s, row) in samples.iter().zip(rows) {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(out, "{},{},{}", s.id, s.label, cells.join(",")).map_err(io)?;
    }
    Ok(())
}
