//! Contrastive training: loss, backprop, AdamW, cosine schedule and early stopping.

mod backward;
mod loss;
mod optim;
mod trainer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{EvalError, RetrievalMode};
use crate::model::ModelError;

pub use backward::backward;
pub use loss::{margin_loss, symmetric_contrastive_loss, LossBreakdown};
pub use optim::{adamw_update, cosine_anneal_lr, AdamW, AdamWConfig};
pub use trainer::{
    read_log, train, train_with_monitor, write_log, EpochLog, TrainOutcome,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("score matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("score matrix contains non-finite values")]
    NonFiniteScores,
    #[error("row {row}: negative index equals the positive index")]
    NegativeIsPositive { row: usize },
    #[error("row {row}: negative index {index} out of range")]
    NegativeOutOfRange { row: usize, index: usize },
    #[error("loss gradient has shape {found:?}, expected {expected:?}")]
    GradientShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("optimizer state does not match the model")]
    OptimizerState,
    #[error("schedule step {step} outside 0..={total_steps}")]
    ScheduleOutOfRange { step: u64, total_steps: u64 },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("train split has fewer than two posts")]
    EmptyTrainSplit,
    #[error("dev split is empty; nothing to monitor")]
    EmptyDevSplit,
    #[error("training diverged in epoch {epoch} (last finite loss {last_finite_loss:?})")]
    Divergence {
        epoch: usize,
        last_finite_loss: Option<f64>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Dev-set metric watched for early stopping: pooled Recall@k.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Monitor {
    pub mode: RetrievalMode,
    pub k: usize,
}

impl Default for Monitor {
    fn default() -> Self {
        Self {
            mode: RetrievalMode::Monolingual,
            k: 10,
        }
    }
}

impl Monitor {
    pub fn name(&self) -> String {
        format!("dev_{}_recall@{}", self.mode, self.k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_min: f64,
    pub optimizer: AdamWConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub monitor: Monitor,
    pub seed: u64,
    pub margin: f64,
    /// Weight of the hinge term; 0 disables it.
    pub margin_weight: f64,
    pub eval_fact_block: usize,
    pub eval_post_block: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10_000,
            learning_rate: 6e-4,
            lr_min: 0.0,
            optimizer: AdamWConfig::default(),
            max_epochs: 30,
            patience: 5,
            monitor: Monitor::default(),
            seed: 0,
            margin: 0.2,
            margin_weight: 0.0,
            eval_fact_block: 4096,
            eval_post_block: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_owned()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.learning_rate) {
            return bad("lr_min must lie in [0, learning_rate]");
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be at least 1");
        }
        if self.monitor.k < 1 {
            return bad("monitor k must be at least 1");
        }
        if self.margin_weight < 0.0 || !self.margin_weight.is_finite() {
            return bad("margin weight must be non-negative");
        }
        Ok(())
    }
}
