//! Expected gap between the population mean and what batch normalization's
//! statistics converge to under an imbalanced current/exemplar batch mix.

use crate::error::{Error, Result};

/// Both readings of the expectation gap. `derived_gap` is the independently
/// derived `mu* - E[mu_BN]`; `printed_form` evaluates the published formula,
/// whose two coefficients carry the opposite sign (it matches
/// `E[mu_BN] - mu*` term by term). Magnitudes and the zero at `B_c = B/t`
/// agree; only the sign convention differs.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanBiasReport {
    pub derived_gap: Vec<f64>,
    pub printed_form: Vec<f64>,
}

/// Expectation gap per channel for task means `task_means[i]` (i = 0..t-1,
/// the last entry being the current task), with `b_c` current rows and `b_p`
/// exemplar rows spread uniformly over the `t - 1` previous tasks.
///
/// `mu* = (1/t) sum_i mu_i` and
/// `E[mu_BN] = (B_c mu_t + (B_p/(t-1)) sum_{i<t} mu_i) / B`.
pub fn expected_bn_mean_bias(
    task_means: &[Vec<f64>],
    b_c: usize,
    b_p: usize,
) -> Result<MeanBiasReport> {
    let t = task_means.len();
    if t < 2 {
        return Err(Error::TooFewTasks { tasks: t });
    }
    let channels = task_means[0].len();
    for m in task_means.iter() {
        if m.len() != channels {
            return Err(Error::RaggedTaskMeans {
                first: channels,
                other: m.len(),
            });
        }
    }
    let b = (b_c + b_p) as f64;
    let tf = t as f64;
    let b_c = b_c as f64;
    let b_p = b_p as f64;

    let mut derived = vec![0.0; channels];
    let mut printed = vec![0.0; channels];
    for c in 0..channels {
        let sum_all: f64 = task_means.iter().map(|m| m[c]).sum();
        let sum_prev: f64 = task_means[..t - 1].iter().map(|m| m[c]).sum();
        let current = task_means[t - 1][c];

        let population = sum_all / tf;
        let expectation = (b_c * current + (b_p / (tf - 1.0)) * sum_prev) / b;
        derived[c] = population - expectation;

        // Published coefficients: (B - B_c t)/(t(t-1)B) on the total mean sum
        // and (B_c t - B)/((t-1)B) on the current-task mean.
        printed[c] = (b - b_c * tf) / (tf * (tf - 1.0) * b) * sum_all
            + (b_c * tf - b) / ((tf - 1.0) * b) * current;
    }
    Ok(MeanBiasReport {
        derived_gap: derived,
        printed_form: printed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn balanced_batch_has_zero_gap() {
        // B_c = B/t: with B = 64, t = 4, B_c = 16, B_p = 48.
        let means = vec![vec![1.0, -3.0], vec![2.0, 0.5], vec![-1.0, 4.0], vec![0.0, 2.0]];
        let report = expected_bn_mean_bias(&means, 16, 48).unwrap();
        for c in 0..2 {
            assert_relative_eq!(report.derived_gap[c], 0.0, epsilon = 1e-12);
            assert_relative_eq!(report.printed_form[c], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn equal_task_means_have_zero_gap() {
        let means = vec![vec![0.7, -0.2]; 5];
        let report = expected_bn_mean_bias(&means, 48, 16).unwrap();
        for c in 0..2 {
            assert_relative_eq!(report.derived_gap[c], 0.0, epsilon = 1e-12);
            assert_relative_eq!(report.printed_form[c], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn printed_form_is_negated_derivation() {
        let means = vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]];
        let report = expected_bn_mean_bias(&means, 48, 16).unwrap();
        assert_relative_eq!(report.printed_form[0], -report.derived_gap[0], max_relative = 1e-12);
        // Direct evaluation: mu* = 2.5, E[mu_BN] = (48*4 + (16/3)*6)/64 = 3.5.
        assert_relative_eq!(report.derived_gap[0], -1.0, max_relative = 1e-12);
    }

    #[test]
    fn single_task_rejected() {
        let means = vec![vec![1.0]];
        assert!(matches!(
            expected_bn_mean_bias(&means, 48, 16),
            Err(Error::TooFewTasks { tasks: 1 })
        ));
    }
}
