//! Desk-scale exemplar-based class-incremental learning: task streams,
//! exemplar memory, batch composition, a tiny trainable network with
//! pluggable normalization, the fine-tuning training loop, and the oracle
//! procedures that repair normalization state with full-data access.

pub mod idx;
pub mod memory;
pub mod model;
pub mod stream;
pub mod train;

pub use idx::{load_idx_dataset, read_idx_images, read_idx_labels, stream_from_idx};
pub use memory::{compose_batch, ExemplarMemory, TaskBatch};
pub use model::{AffineLayer, BodyLayer, ConvLayer, ModelGrads, NormSpec, TinyModel};
pub use stream::{Dataset, SyntheticStream, TaskStream};
pub use train::{
    cross_entropy, evaluate, evaluate_predictions, oracle_recompute_stats,
    oracle_retrain_affine, pooled_train_data, run_cil, run_cil_with_model, train_joint,
    train_task, CilRunResult,
};

use serde::{Deserialize, Serialize};

use crate::norm::{AblationFlags, NormKind};

/// Everything one training run depends on. The synthetic stream parameters
/// live here too, so a (config, seed) pair pins the whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub norm: NormKind,
    pub groups: usize,
    pub ablation: AblationFlags,
    pub bessel: bool,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs_per_task: usize,
    /// Current-task rows per batch (B_c); defaults keep B_c : B_p = 3 : 1.
    pub batch_current: usize,
    /// Exemplar rows per batch (B_p).
    pub batch_exemplar: usize,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub memory_capacity: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    pub mean_scale: f64,
    /// Per-task cluster offset scale; 0 keeps the flat class-corner layout.
    pub task_scale: f64,
    pub noise_std: f64,
    pub hidden_width: usize,
    /// Affine+norm+rectifier blocks in the model body.
    pub blocks: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            norm: NormKind::Bn,
            groups: 8,
            ablation: AblationFlags::default(),
            bessel: false,
            learning_rate: 0.05,
            weight_decay: 1e-4,
            epochs_per_task: 30,
            batch_current: 48,
            batch_exemplar: 16,
            tasks: 5,
            classes_per_task: 2,
            memory_capacity: 60,
            feature_dim: 16,
            samples_per_class: 150,
            mean_scale: 1.0,
            task_scale: 0.0,
            noise_std: 1.0,
            hidden_width: 32,
            blocks: 2,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn with_norm(mut self, norm: NormKind) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_ablation(mut self, flags: AblationFlags) -> Self {
        self.ablation = flags;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn norm_spec(&self) -> NormSpec {
        NormSpec {
            kind: self.norm,
            groups: self.groups,
            ablation: self.ablation,
            bessel: self.bessel,
        }
    }

    pub fn synthetic_stream(&self) -> SyntheticStream {
        SyntheticStream {
            tasks: self.tasks,
            classes_per_task: self.classes_per_task,
            feature_dim: self.feature_dim,
            samples_per_class: self.samples_per_class,
            mean_scale: self.mean_scale,
            task_scale: self.task_scale,
            noise_std: self.noise_std,
        }
    }

    /// The stream for a given run seed (forked so data generation stays
    /// decoupled from training randomness).
    pub fn build_stream(&self, seed: u64) -> TaskStream {
        let mut rng = crate::rng::SeededRng::new(seed).fork(100);
        self.synthetic_stream().build(&mut rng)
    }
}
