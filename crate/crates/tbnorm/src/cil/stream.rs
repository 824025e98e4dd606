//! Task streams: per-task labeled datasets with disjoint class sets.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Labeled samples. Features are stored flat, one `(C, H, W)` block per row;
/// fully-connected features use `H = W = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sample_shape: [usize; 3],
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn empty(sample_shape: [usize; 3]) -> Self {
        Self {
            sample_shape,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.sample_len();
        &self.features[i * len..(i + 1) * len]
    }

    pub fn push(&mut self, features: &[f64], label: usize) {
        assert_eq!(features.len(), self.sample_len());
        self.features.extend_from_slice(features);
        self.labels.push(label);
    }

    /// Stacks the chosen rows into a `(k, C, H, W)` tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let [c, h, w] = self.sample_shape;
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor::from_vec(indices.len(), c, h, w, data).expect("row lengths are consistent")
    }

    /// The whole dataset as one batch tensor.
    pub fn as_tensor(&self) -> Tensor {
        let [c, h, w] = self.sample_shape;
        Tensor::from_vec(self.len(), c, h, w, self.features.clone())
            .expect("row lengths are consistent")
    }
}

/// A sequence of tasks, each adding `classes_per_task` classes never seen
/// before. Train and test splits are indexed by 0-based task.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub classes_per_task: usize,
    pub train: Vec<Dataset>,
    pub test: Vec<Dataset>,
}

impl TaskStream {
    pub fn tasks(&self) -> usize {
        self.train.len()
    }

    /// Classes observed through 1-based task `t`.
    pub fn classes_through(&self, t: usize) -> usize {
        self.classes_per_task * t
    }

    /// 1-based task that introduced each class seen through task `t`.
    pub fn task_of_class(&self, upto_t: usize) -> Vec<usize> {
        (0..self.classes_through(upto_t))
            .map(|c| c / self.classes_per_task + 1)
            .collect()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        self.train[0].sample_shape
    }

    /// Checks the disjoint-classes contract: task `t` must label its samples
    /// in `[m*(t-1), m*t)`.
    pub fn validate(&self) -> Result<()> {
        let m = self.classes_per_task;
        for (ti, (train, test)) in self.train.iter().zip(self.test.iter()).enumerate() {
            for ds in [train, test] {
                for &label in &ds.labels {
                    if label < m * ti || label >= m * (ti + 1) {
                        return Err(Error::InvalidMatrix {
                            reason: format!("task {} contains foreign label {label}", ti + 1),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic Gaussian stream: class means sit on corners of
/// a scaled hypercube, samples add isotropic noise. A nonzero `task_scale`
/// adds a per-task hypercube-corner offset shared by the task's classes, so
/// tasks form separated clusters while classes stay locally close.
#[derive(Debug, Clone)]
pub struct SyntheticStream {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub feature_dim: usize,
    pub samples_per_class: usize,
    pub mean_scale: f64,
    pub task_scale: f64,
    pub noise_std: f64,
}

impl SyntheticStream {
    /// Builds the stream. Each class gets `samples_per_class` draws, split
    /// 80/20 into train/test deterministically from the seed.
    pub fn build(&self, rng: &mut SeededRng) -> TaskStream {
        let dim = self.feature_dim;
        let total_classes = self.tasks * self.classes_per_task;
        let corner = |rng: &mut SeededRng, scale: f64| -> Vec<f64> {
            (0..dim)
                .map(|_| if rng.uniform() < 0.5 { -scale } else { scale })
                .collect()
        };
        let task_centers: Vec<Vec<f64>> = (0..self.tasks)
            .map(|_| {
                if self.task_scale == 0.0 {
                    vec![0.0; dim]
                } else {
                    corner(rng, self.task_scale)
                }
            })
            .collect();
        let means: Vec<Vec<f64>> = (0..total_classes)
            .map(|class| {
                let center = &task_centers[class / self.classes_per_task];
                corner(rng, self.mean_scale)
                    .iter()
                    .zip(center)
                    .map(|(c, t)| c + t)
                    .collect()
            })
            .collect();

        let train_per_class = (self.samples_per_class as f64 * 0.8).round() as usize;
        let mut train = Vec::with_capacity(self.tasks);
        let mut test = Vec::with_capacity(self.tasks);
        for task in 0..self.tasks {
            let mut train_ds = Dataset::empty([dim, 1, 1]);
            let mut test_ds = Dataset::empty([dim, 1, 1]);
            for offset in 0..self.classes_per_task {
                let class = task * self.classes_per_task + offset;
                for i in 0..self.samples_per_class {
                    let row: Vec<f64> = means[class]
                        .iter()
                        .map(|m| rng.normal_scaled(*m, self.noise_std))
                        .collect();
                    if i < train_per_class {
                        train_ds.push(&row, class);
                    } else {
                        test_ds.push(&row, class);
                    }
                }
            }
            train.push(train_ds);
            test.push(test_ds);
        }
        TaskStream {
            classes_per_task: self.classes_per_task,
            train,
            test,
        }
    }
}
