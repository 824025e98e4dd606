//! Normalization layers with hand-derived backward passes.
//!
//! Four layers share one parameter/state record: plain batch normalization,
//! group normalization (no affine, used standalone and as the first stage of
//! continual normalization), continual normalization, and task-balanced batch
//! normalization. Training forwards return an opaque cache that the matching
//! backward consumes by value, so a cache cannot be reused.

mod bias;
mod bn;
mod cn;
mod gn;
mod layer;
mod ratio;
mod tbbn;

pub use bias::{expected_bn_mean_bias, MeanBiasReport};
pub use bn::{bn_forward_eval, bn_forward_train, bn_backward, BnCache};
pub use cn::{cn_backward, cn_forward_eval, cn_forward_train, CnCache};
pub use gn::{gn_backward, gn_forward_eval, gn_forward_train, GnCache};
pub use layer::{NormCache, NormKind, NormLayer};
pub use ratio::{common_divisors, compute_r, feasible_r};
pub use tbbn::{tbbn_backward, tbbn_forward_eval, tbbn_forward_train, TbbnCache};

use serde::{Deserialize, Serialize};

/// Toggles for the task-balanced components; the ablation study flips them
/// one at a time. All-false reproduces vanilla batch normalization exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Normalize the balanced batch with its own statistics (vs. plain
    /// per-channel batch statistics tiled across the splits).
    pub balanced_stats_train: bool,
    /// Feed the running statistics from split-averaged balanced statistics
    /// (vs. plain batch statistics of the unreshaped input).
    pub balanced_stats_test: bool,
    /// Apply the affine transform on the balanced batch with tiled gamma/beta
    /// (vs. after restoring the original layout).
    pub balanced_affine: bool,
}

impl AblationFlags {
    pub const FULL: Self = Self {
        balanced_stats_train: true,
        balanced_stats_test: true,
        balanced_affine: true,
    };

    pub const VANILLA_BN: Self = Self {
        balanced_stats_train: false,
        balanced_stats_test: false,
        balanced_affine: false,
    };

    /// Ablation cases 1..=4: (F,T,T), (T,F,T), (T,T,F), (F,F,T).
    pub fn ablation_case(case: usize) -> Self {
        match case {
            1 => Self {
                balanced_stats_train: false,
                balanced_stats_test: true,
                balanced_affine: true,
            },
            2 => Self {
                balanced_stats_train: true,
                balanced_stats_test: false,
                balanced_affine: true,
            },
            3 => Self {
                balanced_stats_train: true,
                balanced_stats_test: true,
                balanced_affine: false,
            },
            4 => Self {
                balanced_stats_train: false,
                balanced_stats_test: false,
                balanced_affine: true,
            },
            _ => panic!("ablation case must be 1..=4, got {case}"),
        }
    }
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::FULL
    }
}

/// Parameters and running state of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormLayerState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    /// Weight on the fresh batch statistic in the exponential moving average
    /// (the complementary weight stays on the old running value).
    pub momentum_new: f64,
    /// Apply the (V-1)/V factor to the old running variance on update.
    pub bessel_on_running_var: bool,
    /// Group count for the group-normalization stage (GN/CN only).
    pub groups: usize,
    pub ablation: AblationFlags,
}

impl NormLayerState {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: 1e-5,
            momentum_new: 0.1,
            bessel_on_running_var: false,
            groups: 1,
            ablation: AblationFlags::default(),
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_ablation(mut self, flags: AblationFlags) -> Self {
        self.ablation = flags;
        self
    }

    pub fn with_bessel(mut self, on: bool) -> Self {
        self.bessel_on_running_var = on;
        self
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// How a training mini-batch is composed: `current` rows from the running
/// task lead, `exemplar` rows replayed from memory trail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchComposition {
    pub current: usize,
    pub exemplar: usize,
    /// 1-based task index.
    pub task: usize,
}

impl BatchComposition {
    pub fn new(current: usize, exemplar: usize, task: usize) -> Self {
        Self {
            current,
            exemplar,
            task,
        }
    }

    /// A batch drawn entirely from the first task.
    pub fn single_task(batch: usize) -> Self {
        Self {
            current: batch,
            exemplar: 0,
            task: 1,
        }
    }

    pub fn total(&self) -> usize {
        self.current + self.exemplar
    }
}
