//! Evaluation metrics over the lower-triangular accuracy matrix, plus the
//! four-way misclassification taxonomy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-triangular grid `a[t][i]`: accuracy on task `i`'s test set after
/// training through task `t` (both 0-indexed here, `i <= t`).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut matrix = Self::new();
        for row in rows {
            matrix.push_row(row)?;
        }
        Ok(matrix)
    }

    /// Appends the accuracies measured after finishing the next task; row
    /// `t` (0-indexed) must hold exactly `t + 1` entries in `[0, 1]`.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let expected = self.rows.len() + 1;
        if row.len() != expected {
            return Err(Error::InvalidMatrix {
                reason: format!("row {} must have {} entries, got {}", self.rows.len(), expected, row.len()),
            });
        }
        if let Some(bad) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidMatrix {
                reason: format!("accuracy {bad} outside [0, 1]"),
            });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, t: usize, i: usize) -> f64 {
        assert!(i <= t, "upper triangle is unset");
        self.rows[t][i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// One line per row, comma-separated accuracies. `f64` Display prints the
    /// shortest representation that parses back to the same value.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut matrix = Self::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|cell| cell.trim().parse::<f64>()).collect();
            let row = row.map_err(|e| Error::InvalidMatrix {
                reason: format!("unparsable cell: {e}"),
            })?;
            matrix.push_row(row)?;
        }
        Ok(matrix)
    }
}

/// Mean accuracy over all tasks at the end of training.
pub fn final_accuracy(matrix: &AccuracyMatrix) -> f64 {
    let t = matrix.tasks();
    assert!(t > 0, "empty accuracy matrix");
    let last = &matrix.rows[t - 1];
    last.iter().sum::<f64>() / t as f64
}

/// Mean over checkpoints of the mean accuracy over tasks seen so far.
pub fn average_accuracy(matrix: &AccuracyMatrix) -> f64 {
    let t = matrix.tasks();
    assert!(t > 0, "empty accuracy matrix");
    matrix
        .rows
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .sum::<f64>()
        / t as f64
}

/// Mean over tasks of the maximum accuracy drop after the task was learned.
/// The final task has no later checkpoint; its empty maximum contributes 0
/// (keeping the printed divisor T — a common variant divides by T - 1).
pub fn forgetting(matrix: &AccuracyMatrix) -> f64 {
    let t = matrix.tasks();
    assert!(t > 0, "empty accuracy matrix");
    let mut total = 0.0;
    for i in 0..t {
        let mut worst: Option<f64> = None;
        for later in i + 1..t {
            let drop = matrix.get(i, i) - matrix.get(later, i);
            worst = Some(worst.map_or(drop, |w: f64| w.max(drop)));
        }
        total += worst.unwrap_or(0.0);
    }
    total / t as f64
}

/// Mean accuracy of each task immediately after learning it (the diagonal).
pub fn learning_accuracy(matrix: &AccuracyMatrix) -> f64 {
    let t = matrix.tasks();
    assert!(t > 0, "empty accuracy matrix");
    (0..t).map(|i| matrix.get(i, i)).sum::<f64>() / t as f64
}

/// Misclassification counts bucketed by whether the sample and the predicted
/// class belong to the current (final) task or a previous one. Previous-task
/// samples predicted into current-task classes are the biased predictions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MisclassCounts {
    pub current_to_previous: u64,
    pub current_to_current: u64,
    pub previous_to_current: u64,
    pub previous_to_previous: u64,
}

impl MisclassCounts {
    pub fn total(&self) -> u64 {
        self.current_to_previous
            + self.current_to_current
            + self.previous_to_current
            + self.previous_to_previous
    }
}

/// Buckets every misclassified sample by (source task, predicted-class task)
/// membership relative to the final task. `task_of_class[c]` gives the
/// 1-based task that introduced class `c`; the current task is its maximum.
pub fn misclass_taxonomy(
    predictions: &[usize],
    labels: &[usize],
    task_of_class: &[usize],
) -> Result<MisclassCounts> {
    assert_eq!(predictions.len(), labels.len());
    let current_task = *task_of_class.iter().max().expect("no classes seen");
    let mut counts = MisclassCounts::default();
    for (&pred, &label) in predictions.iter().zip(labels.iter()) {
        if pred >= task_of_class.len() {
            return Err(Error::UnseenClass {
                class: pred,
                seen: task_of_class.len(),
            });
        }
        if label >= task_of_class.len() {
            return Err(Error::UnseenClass {
                class: label,
                seen: task_of_class.len(),
            });
        }
        if pred == label {
            continue;
        }
        let from_current = task_of_class[label] == current_task;
        let to_current = task_of_class[pred] == current_task;
        match (from_current, to_current) {
            (true, false) => counts.current_to_previous += 1,
            (true, true) => counts.current_to_current += 1,
            (false, true) => counts.previous_to_current += 1,
            (false, false) => counts.previous_to_previous += 1,
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hand_matrix() -> AccuracyMatrix {
        AccuracyMatrix::from_rows(vec![
            vec![0.9],
            vec![0.8, 0.7],
            vec![0.6, 0.5, 0.8],
        ])
        .unwrap()
    }

    #[test]
    fn hand_matrix_values() {
        let m = hand_matrix();
        // By hand: (0.6+0.5+0.8)/3, (0.9 + 0.75 + 0.6333)/3,
        // (0.3 + 0.2 + 0)/3, (0.9+0.7+0.8)/3.
        assert_relative_eq!(final_accuracy(&m), 1.9 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(average_accuracy(&m), (0.9 + 0.75 + 1.9 / 3.0) / 3.0, epsilon = 1e-12);
        assert_relative_eq!(forgetting(&m), 0.5 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(learning_accuracy(&m), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_matrices() {
        let ones = AccuracyMatrix::from_rows(vec![vec![1.0], vec![1.0, 1.0]]).unwrap();
        assert_relative_eq!(final_accuracy(&ones), 1.0);
        assert_relative_eq!(forgetting(&ones), 0.0);

        let single = AccuracyMatrix::from_rows(vec![vec![0.42]]).unwrap();
        assert_relative_eq!(final_accuracy(&single), 0.42);
        assert_relative_eq!(average_accuracy(&single), 0.42);
        assert_relative_eq!(learning_accuracy(&single), 0.42);
        assert_relative_eq!(forgetting(&single), 0.0);
    }

    #[test]
    fn constant_matrix_fixes_all_metrics() {
        let c = 0.65;
        let m = AccuracyMatrix::from_rows(vec![vec![c], vec![c, c], vec![c, c, c], vec![c, c, c, c]])
            .unwrap();
        assert_relative_eq!(final_accuracy(&m), c, epsilon = 1e-12);
        assert_relative_eq!(average_accuracy(&m), c, epsilon = 1e-12);
        assert_relative_eq!(learning_accuracy(&m), c, epsilon = 1e-12);
        assert_relative_eq!(forgetting(&m), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn matrix_validation() {
        let mut m = AccuracyMatrix::new();
        assert!(m.push_row(vec![0.5, 0.5]).is_err());
        m.push_row(vec![0.5]).unwrap();
        assert!(m.push_row(vec![1.5, 0.0]).is_err());
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let m = AccuracyMatrix::from_rows(vec![
            vec![0.9123456789012345],
            vec![1.0 / 3.0, 0.7],
            vec![0.6, 0.5000000001, 0.8],
        ])
        .unwrap();
        let parsed = AccuracyMatrix::from_csv(&m.to_csv()).unwrap();
        assert_eq!(parsed, m);
    }

    #[test]
    fn taxonomy_buckets() {
        // Tasks of classes 0..=5: [1,1,2,2,3,3]; current task = 3.
        let tasks = vec![1, 1, 2, 2, 3, 3];
        let all_correct = misclass_taxonomy(&[0, 3, 5], &[0, 3, 5], &tasks).unwrap();
        assert_eq!(all_correct.total(), 0);

        // A current-task sample predicted as a task-1 class.
        let counts = misclass_taxonomy(&[0], &[4], &tasks).unwrap();
        assert_eq!(counts.current_to_previous, 1);

        let counts = misclass_taxonomy(
            &[4, 5, 0, 2, 3],
            &[0, 4, 2, 3, 3],
            &tasks,
        )
        .unwrap();
        // label 0 (prev) -> pred 4 (cur): P->C; label 4 (cur) -> pred 5 (cur): C->C;
        // label 2 (prev) -> pred 0 (prev): P->P; label 3 (prev) -> pred 2 (prev): P->P;
        // label 3 == pred 3 correct.
        assert_eq!(counts.previous_to_current, 1);
        assert_eq!(counts.current_to_current, 1);
        assert_eq!(counts.previous_to_previous, 2);
        assert_eq!(counts.current_to_previous, 0);
        assert_eq!(counts.total(), 4);
    }

    #[test]
    fn taxonomy_rejects_unseen_class() {
        let tasks = vec![1, 1];
        assert!(matches!(
            misclass_taxonomy(&[7], &[0], &tasks),
            Err(Error::UnseenClass { class: 7, .. })
        ));
    }
}
