//! Training loop for the fine-tuning baseline, evaluation, and the two
//! oracle procedures that repair normalization state with full-data access.

use crate::error::Result;
use crate::metrics::{misclass_taxonomy, AccuracyMatrix, MisclassCounts};
use crate::norm::BatchComposition;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::memory::{compose_batch, ExemplarMemory};
use super::model::TinyModel;
use super::stream::{Dataset, TaskStream};
use super::TrainConfig;

/// Softmax cross-entropy over all head classes, averaged over the batch.
/// Returns the loss and the logit gradient.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let [b, c, _, _] = logits.shape();
    assert_eq!(labels.len(), b);
    let mut grad = Tensor::zeros(b, c, 1, 1);
    let mut loss = 0.0;
    let inv_b = 1.0 / b as f64;
    for bi in 0..b {
        let row = &logits.data()[bi * c..(bi + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln() + max;
        loss += (log_denom - row[labels[bi]]) * inv_b;
        for ci in 0..c {
            let p = (row[ci] - max).exp() / denom;
            let target = if ci == labels[bi] { 1.0 } else { 0.0 };
            grad.data_mut()[bi * c + ci] = (p - target) * inv_b;
        }
    }
    (loss, grad)
}

/// Fine-tunes the model on task `t` (1-based): composed current+exemplar
/// batches, cross-entropy over all classes seen so far, plain SGD. The head
/// must already be grown to cover the task's classes.
pub fn train_task(
    model: &mut TinyModel,
    stream: &TaskStream,
    t: usize,
    memory: &ExemplarMemory,
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<()> {
    assert!(t >= 1 && t <= stream.tasks());
    assert_eq!(model.classes(), stream.classes_through(t), "head not grown to C_t");
    let dataset = &stream.train[t - 1];
    let steps_per_epoch = (dataset.len() / cfg.batch_current).max(1);
    for _epoch in 0..cfg.epochs_per_task {
        for _step in 0..steps_per_epoch {
            let batch = compose_batch(
                dataset,
                memory,
                cfg.batch_current,
                cfg.batch_exemplar,
                t,
                rng,
            )?;
            let (logits, cache) = model.forward_train(&batch.x, batch.comp)?;
            let (_, d_logits) = cross_entropy(&logits, &batch.labels);
            let (_, grads) = model.backward(&d_logits, cache);
            model.sgd_step(&grads, cfg.learning_rate, cfg.weight_decay);
        }
    }
    Ok(())
}

/// Per-task test accuracy `a[t][i]` for `i = 1..=upto_t`, eval-mode
/// normalization throughout.
pub fn evaluate(model: &TinyModel, stream: &TaskStream, upto_t: usize) -> Result<Vec<f64>> {
    let mut row = Vec::with_capacity(upto_t);
    for i in 0..upto_t {
        let ds = &stream.test[i];
        let logits = model.forward_eval(&ds.as_tensor())?;
        let correct = argmax_rows(&logits)
            .iter()
            .zip(&ds.labels)
            .filter(|(p, l)| p == l)
            .count();
        row.push(correct as f64 / ds.len() as f64);
    }
    Ok(row)
}

/// Predictions and labels pooled over the test sets of tasks `1..=upto_t`.
pub fn evaluate_predictions(
    model: &TinyModel,
    stream: &TaskStream,
    upto_t: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut predictions = Vec::new();
    let mut labels = Vec::new();
    for i in 0..upto_t {
        let ds = &stream.test[i];
        let logits = model.forward_eval(&ds.as_tensor())?;
        predictions.extend(argmax_rows(&logits));
        labels.extend_from_slice(&ds.labels);
    }
    Ok((predictions, labels))
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let [b, c, _, _] = logits.shape();
    (0..b)
        .map(|bi| {
            let row = &logits.data()[bi * c..(bi + 1) * c];
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Replaces every normalization layer's running statistics with exact
/// aggregate statistics of the given data's activations. All parameters stay
/// frozen; a single pass.
pub fn oracle_recompute_stats(model: &mut TinyModel, full_data: &Dataset) -> Result<()> {
    model.recompute_norm_stats(&full_data.as_tensor())
}

/// Retrains only the normalization gamma/beta parameters on the given data
/// (cross-entropy, plain SGD). Normalization uses the frozen running
/// statistics, so everything except gamma/beta is untouched.
pub fn oracle_retrain_affine(
    model: &mut TinyModel,
    full_data: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
    rng: &mut SeededRng,
) -> Result<()> {
    let batch = cfg.batch_current + cfg.batch_exemplar;
    let steps_per_epoch = (full_data.len() / batch).max(1);
    for _epoch in 0..epochs {
        for _step in 0..steps_per_epoch {
            let indices: Vec<usize> = (0..batch).map(|_| rng.below(full_data.len())).collect();
            let x = full_data.gather(&indices);
            let labels: Vec<usize> = indices.iter().map(|&i| full_data.labels[i]).collect();
            let (logits, cache) = model.forward_eval_cached(&x)?;
            let (_, d_logits) = cross_entropy(&logits, &labels);
            let grads = model.backward_eval(&d_logits, cache);
            model.sgd_step_norm_affine_only(&grads, cfg.learning_rate, cfg.weight_decay);
        }
    }
    Ok(())
}

/// Outcome of a full class-incremental run.
#[derive(Debug, Clone)]
pub struct CilRunResult {
    pub matrix: AccuracyMatrix,
    pub taxonomy: MisclassCounts,
}

/// Runs the fine-tuning baseline over the whole stream: per task, grow the
/// head, train on composed batches, update memory, evaluate every seen task.
pub fn run_cil(stream: &TaskStream, cfg: &TrainConfig, seed: u64) -> Result<CilRunResult> {
    let root = SeededRng::new(seed);
    let mut init_rng = root.fork(1);
    let mut train_rng = root.fork(2);
    let mut memory_rng = root.fork(3);

    let [c, _, _] = stream.sample_shape();
    let mut model = TinyModel::mlp_with_depth(
        c,
        cfg.hidden_width,
        cfg.blocks,
        cfg.norm_spec(),
        stream.classes_per_task,
        &mut init_rng,
    );
    let mut memory = ExemplarMemory::new(cfg.memory_capacity, stream.sample_shape());
    let mut matrix = AccuracyMatrix::new();

    for t in 1..=stream.tasks() {
        if t > 1 {
            model.grow_head(stream.classes_per_task);
        }
        train_task(&mut model, stream, t, &memory, cfg, &mut train_rng)?;
        memory.update(&stream.train[t - 1], stream.classes_through(t), &mut memory_rng);
        matrix.push_row(evaluate(&model, stream, t)?)?;
    }

    let (predictions, labels) = evaluate_predictions(&model, stream, stream.tasks())?;
    let taxonomy = misclass_taxonomy(&predictions, &labels, &stream.task_of_class(stream.tasks()))?;
    Ok(CilRunResult { matrix, taxonomy })
}

/// Same run but also returning the trained model and memory, for the oracle
/// experiment which keeps operating on the trained network.
pub fn run_cil_with_model(
    stream: &TaskStream,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(CilRunResult, TinyModel)> {
    let root = SeededRng::new(seed);
    let mut init_rng = root.fork(1);
    let mut train_rng = root.fork(2);
    let mut memory_rng = root.fork(3);

    let [c, _, _] = stream.sample_shape();
    let mut model = TinyModel::mlp_with_depth(
        c,
        cfg.hidden_width,
        cfg.blocks,
        cfg.norm_spec(),
        stream.classes_per_task,
        &mut init_rng,
    );
    let mut memory = ExemplarMemory::new(cfg.memory_capacity, stream.sample_shape());
    let mut matrix = AccuracyMatrix::new();
    for t in 1..=stream.tasks() {
        if t > 1 {
            model.grow_head(stream.classes_per_task);
        }
        train_task(&mut model, stream, t, &memory, cfg, &mut train_rng)?;
        memory.update(&stream.train[t - 1], stream.classes_through(t), &mut memory_rng);
        matrix.push_row(evaluate(&model, stream, t)?)?;
    }
    let (predictions, labels) = evaluate_predictions(&model, stream, stream.tasks())?;
    let taxonomy = misclass_taxonomy(&predictions, &labels, &stream.task_of_class(stream.tasks()))?;
    Ok((CilRunResult { matrix, taxonomy }, model))
}

/// Joint-training upper bound: one model trained on the union of all tasks'
/// training data as a single task, with the full class head from the start.
pub fn train_joint(stream: &TaskStream, cfg: &TrainConfig, seed: u64) -> Result<TinyModel> {
    let root = SeededRng::new(seed);
    let mut init_rng = root.fork(4);
    let mut train_rng = root.fork(5);

    let union = pooled_train_data(stream);
    let [c, _, _] = stream.sample_shape();
    let total_classes = stream.classes_through(stream.tasks());
    let mut model = TinyModel::mlp_with_depth(
        c,
        cfg.hidden_width,
        cfg.blocks,
        cfg.norm_spec(),
        total_classes,
        &mut init_rng,
    );

    let batch = cfg.batch_current + cfg.batch_exemplar;
    let steps_per_epoch = (union.len() / batch).max(1);
    let epochs = cfg.epochs_per_task * stream.tasks();
    for _ in 0..epochs {
        for _ in 0..steps_per_epoch {
            let indices: Vec<usize> = (0..batch).map(|_| train_rng.below(union.len())).collect();
            let x = union.gather(&indices);
            let labels: Vec<usize> = indices.iter().map(|&i| union.labels[i]).collect();
            let (logits, cache) = model.forward_train(&x, BatchComposition::single_task(batch))?;
            let (_, d_logits) = cross_entropy(&logits, &labels);
            let (_, grads) = model.backward(&d_logits, cache);
            model.sgd_step(&grads, cfg.learning_rate, cfg.weight_decay);
        }
    }
    Ok(model)
}

/// Union of all tasks' training datasets.
pub fn pooled_train_data(stream: &TaskStream) -> Dataset {
    let mut pooled = Dataset::empty(stream.sample_shape());
    for ds in &stream.train {
        for i in 0..ds.len() {
            pooled.push(ds.sample(i), ds.labels[i]);
        }
    }
    pooled
}
