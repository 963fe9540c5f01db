//! Mini-batch training loop and its CSV metric log.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use super::config::RunConfig;
use super::data::Dataset;
use super::net::{argmax, Model};
use super::optim::{adamw_step, OptimState};
use super::rng::{stream, stream_rng};
use crate::error::{invalid, Error, Result};

/// Loss and accuracy of one split after one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub optim: OptimState,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainOutcome {
    /// Held-out accuracy of the last epoch, if a test split exists.
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.metrics.iter().rev().find(|m| m.split == Split::Test).map(|m| m.accuracy)
    }
}

/// Trains for `config.train.epochs` epochs.
pub fn train(config: &RunConfig, data: &Dataset) -> Result<TrainOutcome> {
    train_with(config, data, |_| true)
}

/// Like [`train`]; `keep_going` sees the metrics logged so far after every
/// epoch and stops the run by returning `false`.
pub fn train_with(
    config: &RunConfig,
    data: &Dataset,
    mut keep_going: impl FnMut(&[EpochMetrics]) -> bool,
) -> Result<TrainOutcome> {
    config.validate()?;
    data.check_compatible(&config.model)?;
    let tc = &config.train;
    let mut model = Model::init(&config.model)?;
    let mut optim = OptimState::new(model.params(), tc);
    let decay: Vec<bool> = model.specs().iter().map(|s| s.decay).collect();
    let (mut train_idx, test_idx) = data.holdout_split(tc.holdout);
    if train_idx.is_empty() {
        return Err(invalid("no training samples after the holdout split"));
    }
    let mut shuffle = stream_rng(config.seed(), stream::SHUFFLE);
    let mut metrics = Vec::new();

    for epoch in 1..=tc.epochs {
        train_idx.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (step, chunk) in train_idx.chunks(tc.batch_size).enumerate() {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| (&data.samples[i].tokens, data.samples[i].label))
                .collect();
            let out = model.batch_grad(&batch)?;
            if !out.loss.is_finite() || out.grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!(
                    "epoch {epoch}, step {step}: batch loss {} (lr {}, samples {:?})",
                    out.loss, tc.lr, chunk
                )));
            }
            loss_sum += out.loss * chunk.len() as f64;
            correct += out.correct;
            adamw_step(model.params_mut(), &out.grads, &decay, &mut optim)?;
        }
        let n = train_idx.len() as f64;
        metrics.push(EpochMetrics {
            epoch,
            split: Split::Train,
            loss: loss_sum / n,
            accuracy: correct as f64 / n,
        });
        if !test_idx.is_empty() {
            let (loss, accuracy) = evaluate(&model, data, &test_idx)?;
            metrics.push(EpochMetrics {
                epoch,
                split: Split::Test,
                loss,
                accuracy,
            });
        }
        log::debug!("epoch {epoch}: {:?}", &metrics[metrics.len().saturating_sub(2)..]);
        if !keep_going(&metrics) {
            break;
        }
    }
    Ok(TrainOutcome { model, optim, metrics })
}

/// Mean cross-entropy and accuracy over `indices`.
pub fn evaluate(model: &Model, data: &Dataset, indices: &[usize]) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(invalid("no samples to evaluate"));
    }
    let one = |&i: &usize| -> Result<(f64, bool)> {
        let s = &data.samples[i];
        let logits = model.logits(&s.tokens)?;
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        Ok((lse - logits[s.label], argmax(&logits) == s.label))
    };
    #[cfg(feature = "parallel")]
    let results: Vec<_> = indices.par_iter().map(one).collect();
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = indices.iter().map(one).collect();
    let mut loss = 0.0;
    let mut correct = 0;
    for r in results {
        let (l, c) = r?;
        loss += l;
        correct += usize::from(c);
    }
    let n = indices.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// `epoch,split,loss,accuracy` with six decimals.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,split,loss,accuracy\n");
    for m in metrics {
        let _ = writeln!(s, "{},{},{:.6},{:.6}", m.epoch, m.split.name(), m.loss, m.accuracy);
    }
    s
}
