//! Two-stage contrastive training, cross-validated identification and reports.

mod metrics;
mod pairs;
mod protocol;
mod saliency;
mod stage;

use serde::{Deserialize, Serialize};

pub use metrics::{similarity_matrix, topk_accuracy, FoldResult, Metrics, SimilarityMatrix};
pub use pairs::{batch_order, make_batch, make_training_pairs, pair_labels, Batch, PairSource};
pub use protocol::{
    ablation_suite, channel_contribution, cross_validate, evaluate, fingerprint_scan, identify,
    run_fold, run_protocol, train_model, Condition, ExperimentRow, ExperimentTable, FoldPlan,
    RasterCohort, Readout, TrainedModel,
};
pub use saliency::{occlusion_saliency, SaliencyReport};
pub use stage::{batch_loss, train_stage1, train_stage2, EpochLoss, TrainHistory};

use crate::error::{Error, Result};
use crate::raster::AugmentPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Siamese margin loss summed over positive and negative pairs.
    Margin,
    NtXent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    /// Stage-2 epochs.
    pub epochs_fusion: usize,
    pub batch_pretrain: usize,
    /// Batch size of fine-tuning and stage 2.
    pub batch_finetune: usize,
    pub margin: f64,
    pub tau: f64,
    pub loss: LossKind,
    /// Count both `(i, j)` and `(j, i)` as negatives.
    pub ordered_negatives: bool,
    /// Global gradient-norm cap per step; 0 disables clipping.
    pub grad_clip: f64,
    /// Taken from the run config's own section.
    #[serde(skip)]
    pub augment: AugmentPolicy,
    /// Derived from the run's master seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            momentum: 0.9,
            weight_decay: 5e-5,
            epochs_pretrain: 8,
            epochs_finetune: 8,
            epochs_fusion: 8,
            batch_pretrain: 16,
            batch_finetune: 8,
            margin: 1.0,
            tau: 0.5,
            loss: LossKind::Margin,
            ordered_negatives: false,
            grad_clip: 10.0,
            augment: AugmentPolicy::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("train config: {what}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_pretrain < 2 || self.batch_finetune < 2 {
            return bad("batch sizes must be at least 2");
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad("grad_clip must be non-negative");
        }
        if !(self.margin > 0.0 && self.tau > 0.0) {
            return bad("margin and tau must be positive");
        }
        self.augment.validate()
    }
}
