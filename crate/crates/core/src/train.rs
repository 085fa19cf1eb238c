//! Supervised fine-tuning loop over rendered examples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LossRecord, Model, TokenBatch};
use crate::numerics::SeededRng;
use crate::sft::{SentimentLabel, SftExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub alpha: f64,
    pub shuffle_seed: u64,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 64,
            epochs: 1,
            alpha: 0.01,
            shuffle_seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "train.learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("train.alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub task_loss: f64,
    pub balance_loss: f64,
    pub total: f64,
}

/// Pads the examples into one batch with answer-only loss masks.
pub fn batch_from_examples<'a>(examples: impl IntoIterator<Item = &'a SftExample>) -> Result<TokenBatch> {
    TokenBatch::padded(examples.into_iter().map(|e| (e.tokens(), e.loss_mask())).collect())
}

/// Runs the configured epochs of SGD on the MoE parameters, calling
/// `on_step` with the updated model after each step.
pub fn fit(
    model: &mut Model,
    examples: &[SftExample],
    tc: &TrainConfig,
    mut on_step: impl FnMut(&StepLog, &Model),
) -> Result<Vec<StepLog>> {
    tc.validate()?;
    if examples.is_empty() {
        return Err(Error::Input("no training examples".into()));
    }
    let mut rng = SeededRng::new(tc.shuffle_seed);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    'epochs: for epoch in 0..tc.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(tc.batch_size) {
            if tc.max_steps.is_some_and(|m| log.len() >= m) {
                break 'epochs;
            }
            let batch = batch_from_examples(chunk.iter().map(|&i| &examples[i]))?;
            let step = log.len();
            let rec: LossRecord = model
                .train_step(&batch, tc.learning_rate, tc.alpha)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { task, balance, .. } => Error::NonFiniteLoss { step, task, balance },
                    other => other,
                })?;
            let entry = StepLog {
                step,
                epoch,
                task_loss: rec.task_loss,
                balance_loss: rec.balance_loss,
                total: rec.total,
            };
            on_step(&entry, model);
            log.push(entry);
        }
    }
    Ok(log)
}

/// Mean label-token cross-entropy (and token-weighted balance loss) over
/// `examples`, evaluated in batches without updating the model.
pub fn mean_losses(model: &Model, examples: &[SftExample], batch_size: usize, alpha: f64) -> Result<LossRecord> {
    let mut task = 0.0;
    let mut balance = 0.0;
    let mut scored = 0usize;
    let mut tokens = 0usize;
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = batch_from_examples(chunk)?;
        let rec = model.evaluate(&batch, alpha)?;
        let n = batch.targets().1.iter().filter(|&&m| m).count();
        task += rec.task_loss * n as f64;
        scored += n;
        balance += rec.balance_loss * batch.num_tokens() as f64;
        tokens += batch.num_tokens();
    }
    if scored == 0 {
        return Err(Error::EmptyLossSupport);
    }
    let task_loss = task / scored as f64;
    let balance_loss = balance / tokens as f64;
    Ok(LossRecord {
        task_loss,
        balance_loss,
        total: task_loss + alpha * balance_loss,
    })
}

/// Classifies each example's prompt by label scoring.
pub fn predict(model: &Model, examples: &[SftExample]) -> Result<Vec<SentimentLabel>> {
    examples
        .iter()
        .map(|e| model.score_labels(&e.prompt).map(|s| s.label))
        .collect()
}
