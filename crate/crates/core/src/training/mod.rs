//! Datasets, splits, optimization, early stopping and checkpointing.

mod adam;
mod checkpoint;
mod trainer;

pub use adam::{adam_step, AdamParams, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use trainer::{
    load_dataset, predict_outputs, train, train_with_resume, write_loss_log, EpochLog, ResumeState, TrainItem,
    TrainOutcome,
};

use crate::nets::NetError;
use crate::tensor::TensorError;
use crate::volume::VolumeError;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {context}")]
    NonFiniteLoss { epoch: usize, batch: usize, context: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Which loss the trainer minimizes; must be consistent with the task
/// (classification → bce, regression → mae).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    Mae,
}

fn default_batch() -> usize {
    4
}
fn default_lr() -> f64 {
    1e-4
}
fn default_max_epochs() -> usize {
    200
}
fn default_patience() -> usize {
    10
}
fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Derived from the task when omitted.
    #[serde(default)]
    pub loss: Option<LossKind>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch(),
            learning_rate: default_lr(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            loss: None,
            seed: default_seed(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.patience < 1 {
            return Err(TrainError::Config("patience must be >= 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if self.max_epochs < 1 {
            return Err(TrainError::Config("max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Train/validation membership produced by [`split_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub seed: u64,
}

/// 2:1 train/validation split: deterministic seeded shuffle, then a prefix
/// of round(n·2/3) ids goes to training.
pub fn split_dataset(ids: &[String], seed: u64) -> Result<SplitPlan> {
    if ids.len() < 3 {
        return Err(TrainError::Config(format!("need at least 3 ids to split, got {}", ids.len())));
    }
    let mut shuffled: Vec<String> = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let train_size = ((ids.len() as f64) * 2.0 / 3.0).round() as usize;
    let val = shuffled.split_off(train_size);
    Ok(SplitPlan { train: shuffled, val, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:03}")).collect()
    }

    #[test]
    fn nine_ids_split_six_three() {
        let plan = split_dataset(&ids(9), 42).unwrap();
        assert_eq!(plan.train.len(), 6);
        assert_eq!(plan.val.len(), 3);
    }

    #[test]
    fn same_seed_same_plan() {
        let a = split_dataset(&ids(20), 42).unwrap();
        let b = split_dataset(&ids(20), 42).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(&ids(20), 43).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn split_is_a_partition() {
        let all = ids(25);
        let plan = split_dataset(&all, 7).unwrap();
        let mut union: Vec<String> = plan.train.iter().chain(&plan.val).cloned().collect();
        union.sort();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(union, sorted);
        assert!(plan.train.iter().all(|id| !plan.val.contains(id)));
    }

    #[test]
    fn too_few_ids_rejected() {
        assert!(split_dataset(&ids(2), 1).is_err());
    }
}
