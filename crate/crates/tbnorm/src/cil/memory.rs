//! Capped, class-balanced exemplar memory and mini-batch composition.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::norm::BatchComposition;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::stream::Dataset;

/// Fixed-capacity store of past-task samples with per-class quotas. After the
/// update for task `t`, every seen class holds `min(available, |M| / C_t)`
/// samples.
#[derive(Debug, Clone)]
pub struct ExemplarMemory {
    capacity: usize,
    sample_shape: [usize; 3],
    per_class: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl ExemplarMemory {
    pub fn new(capacity: usize, sample_shape: [usize; 3]) -> Self {
        Self {
            capacity,
            sample_shape,
            per_class: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn total(&self) -> usize {
        self.per_class.values().map(|v| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn class_count(&self, class: usize) -> usize {
        self.per_class.get(&class).map_or(0, |v| v.len())
    }

    pub fn classes(&self) -> Vec<usize> {
        self.per_class.keys().copied().collect()
    }

    /// Folds in the finished task's dataset: recompute the quota for
    /// `classes_seen` classes, down-sample stored classes uniformly at random
    /// to the quota, and fill the new classes up to it.
    pub fn update(&mut self, dataset: &Dataset, classes_seen: usize, rng: &mut SeededRng) {
        assert!(classes_seen > 0);
        let quota = self.capacity / classes_seen;

        for samples in self.per_class.values_mut() {
            if samples.len() > quota {
                let keep = rng.sample_distinct(samples.len(), quota);
                let mut kept: Vec<Vec<f64>> = keep.iter().map(|&i| samples[i].clone()).collect();
                std::mem::swap(samples, &mut kept);
            }
        }

        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &label) in dataset.labels.iter().enumerate() {
            by_class.entry(label).or_default().push(i);
        }
        for (class, rows) in by_class {
            let take = quota.min(rows.len());
            let picks = rng.sample_distinct(rows.len(), take);
            let entry = self.per_class.entry(class).or_default();
            entry.clear();
            for p in picks {
                entry.push(dataset.sample(rows[p]).to_vec());
            }
        }
        debug_assert!(self.total() <= self.capacity);
    }

    /// `k` rows drawn uniformly (with replacement) over all stored samples.
    pub fn draw(&self, k: usize, rng: &mut SeededRng) -> Result<(Vec<f64>, Vec<usize>)> {
        if self.is_empty() {
            return Err(Error::EmptySource {
                what: "exemplar memory".to_string(),
            });
        }
        let flat: Vec<(usize, &Vec<f64>)> = self
            .per_class
            .iter()
            .flat_map(|(&class, samples)| samples.iter().map(move |s| (class, s)))
            .collect();
        let mut features = Vec::with_capacity(k * self.sample_shape.iter().product::<usize>());
        let mut labels = Vec::with_capacity(k);
        for _ in 0..k {
            let (class, sample) = flat[rng.below(flat.len())];
            features.extend_from_slice(sample);
            labels.push(class);
        }
        Ok((features, labels))
    }
}

/// A composed mini-batch: current-task rows first, exemplar rows after.
#[derive(Debug, Clone)]
pub struct TaskBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub comp: BatchComposition,
}

/// Samples `b_c` rows uniformly from the current task's dataset followed by
/// `b_p` rows uniformly from memory. The first task always composes a
/// current-only batch.
pub fn compose_batch(
    dataset: &Dataset,
    memory: &ExemplarMemory,
    b_c: usize,
    b_p: usize,
    task: usize,
    rng: &mut SeededRng,
) -> Result<TaskBatch> {
    if dataset.is_empty() {
        return Err(Error::EmptySource {
            what: "current-task dataset".to_string(),
        });
    }
    let b_p = if task == 1 { 0 } else { b_p };

    let [c, h, w] = dataset.sample_shape;
    let mut features = Vec::with_capacity((b_c + b_p) * dataset.sample_len());
    let mut labels = Vec::with_capacity(b_c + b_p);
    for _ in 0..b_c {
        let i = rng.below(dataset.len());
        features.extend_from_slice(dataset.sample(i));
        labels.push(dataset.labels[i]);
    }
    if b_p > 0 {
        let (mem_features, mem_labels) = memory.draw(b_p, rng)?;
        features.extend_from_slice(&mem_features);
        labels.extend_from_slice(&mem_labels);
    }
    let x = Tensor::from_vec(b_c + b_p, c, h, w, features).expect("row lengths are consistent");
    Ok(TaskBatch {
        x,
        labels,
        comp: BatchComposition::new(b_c, b_p, task),
    })
}
