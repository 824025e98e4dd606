//! Batch normalization: empirical per-channel statistics, affine transform,
//! exponential-moving-average running statistics, and the analytic backward
//! pass through the statistics.

use crate::error::{Error, Result};
use crate::norm::NormLayerState;
use crate::tensor::Tensor;

/// Values the backward pass needs; produced by one training forward and
/// consumed (by value) at most once.
#[derive(Debug)]
pub struct BnCache {
    pub(crate) normalized: Tensor,
    pub(crate) inv_std: Vec<f64>,
}

/// EMA update of the running statistics with the fresh batch statistics.
/// `reduce_count` is the number of elements behind each per-channel statistic.
pub(crate) fn update_running_stats(
    state: &mut NormLayerState,
    batch_mean: &[f64],
    batch_var: &[f64],
    reduce_count: usize,
) {
    let alpha = state.momentum_new;
    let factor = if state.bessel_on_running_var && reduce_count > 0 {
        (reduce_count as f64 - 1.0) / reduce_count as f64
    } else {
        1.0
    };
    for c in 0..state.channels() {
        state.running_mean[c] = (1.0 - alpha) * state.running_mean[c] + alpha * batch_mean[c];
        state.running_var[c] =
            (1.0 - alpha) * factor * state.running_var[c] + alpha * batch_var[c];
    }
}

/// Normalizes with the given per-channel statistics and applies the affine
/// transform. Also returns the pre-affine normalized tensor and the inverse
/// standard deviations, both of which the backward pass reuses.
pub(crate) fn normalize_affine(
    x: &Tensor,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
    epsilon: f64,
) -> (Tensor, Tensor, Vec<f64>) {
    let [b, c, h, w] = x.shape();
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut normalized = Tensor::zeros(b, c, h, w);
    let mut out = Tensor::zeros(b, c, h, w);
    let spatial = h * w;
    for bi in 0..b {
        for ci in 0..c {
            let start = x.index(bi, ci, 0, 0);
            for off in 0..spatial {
                let xn = (x.data()[start + off] - mean[ci]) * inv_std[ci];
                normalized.data_mut()[start + off] = xn;
                out.data_mut()[start + off] = gamma[ci] * xn + beta[ci];
            }
        }
    }
    (out, normalized, inv_std)
}

pub fn bn_forward_train(x: &Tensor, state: &mut NormLayerState) -> Result<(Tensor, BnCache)> {
    assert_eq!(
        x.channels(),
        state.channels(),
        "layer width does not match input channels"
    );
    let count = x.batch() * x.spatial();
    if count < 2 {
        return Err(Error::DegenerateReduction { count });
    }
    let (mean, var) = x.channel_stats()?;
    let (out, normalized, inv_std) =
        normalize_affine(x, &mean, &var, &state.gamma, &state.beta, state.epsilon);
    update_running_stats(state, &mean, &var, count);
    Ok((out, BnCache { normalized, inv_std }))
}

pub fn bn_forward_eval(x: &Tensor, state: &NormLayerState) -> Tensor {
    assert_eq!(
        x.channels(),
        state.channels(),
        "layer width does not match input channels"
    );
    let (out, _, _) = normalize_affine(
        x,
        &state.running_mean,
        &state.running_var,
        &state.gamma,
        &state.beta,
        state.epsilon,
    );
    out
}

/// Gradients of the loss with respect to the layer input and the affine
/// parameters, exact through the batch statistics' dependence on the input.
pub fn bn_backward(
    grad_output: &Tensor,
    cache: BnCache,
    state: &NormLayerState,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let BnCache { normalized, inv_std } = cache;
    let [b, c, h, w] = normalized.shape();
    assert_eq!(grad_output.shape(), [b, c, h, w], "gradient shape mismatch");
    let spatial = h * w;
    let count = (b * spatial) as f64;

    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let start = normalized.index(bi, ci, 0, 0);
            for off in 0..spatial {
                let g = grad_output.data()[start + off];
                d_gamma[ci] += g * normalized.data()[start + off];
                d_beta[ci] += g;
            }
        }
    }

    // dx = gamma*inv_std/N * (N*g - sum(g) - xhat*sum(g*xhat)), per channel.
    let mut d_input = Tensor::zeros(b, c, h, w);
    for bi in 0..b {
        for ci in 0..c {
            let scale = state.gamma[ci] * inv_std[ci] / count;
            let start = normalized.index(bi, ci, 0, 0);
            for off in 0..spatial {
                let g = grad_output.data()[start + off];
                let xn = normalized.data()[start + off];
                d_input.data_mut()[start + off] =
                    scale * (count * g - d_beta[ci] - xn * d_gamma[ci]);
            }
        }
    }
    (d_input, d_gamma, d_beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use approx::assert_relative_eq;

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::from_fn(4, 3, 2, 2, |_, c, _, _| (c as f64) * 7.0 + 1.0);
        let mut state = NormLayerState::new(3);
        let (y, _) = bn_forward_train(&x, &mut state).unwrap();
        for v in y.data() {
            assert!(v.abs() < 1e-6, "constant channel should map near zero, got {v}");
        }
    }

    #[test]
    fn affine_identity_on_prenormalized_input() {
        // Construct a channel with exact mean 0, variance 1.
        let vals = [-1.0, 1.0, -1.0, 1.0];
        let x = Tensor::from_vec(4, 1, 1, 1, vals.to_vec()).unwrap();
        let mut state = NormLayerState::new(1);
        state.gamma[0] = 2.0;
        state.beta[0] = 3.0;
        let (y, _) = bn_forward_train(&x, &mut state).unwrap();
        for (yv, xv) in y.data().iter().zip(vals.iter()) {
            assert_relative_eq!(*yv, 2.0 * xv + 3.0, max_relative = 1e-5);
        }
    }

    #[test]
    fn scalar_reference_single_channel() {
        // Independent scalar computation: y = (x - 2.5) / sqrt(1.25 + 1e-5).
        let x = Tensor::from_vec(4, 1, 1, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut state = NormLayerState::new(1);
        let (y, _) = bn_forward_train(&x, &mut state).unwrap();
        let denom = (1.25f64 + 1e-5).sqrt();
        for (i, v) in [1.0f64, 2.0, 3.0, 4.0].iter().enumerate() {
            assert_relative_eq!(y.data()[i], (v - 2.5) / denom, max_relative = 1e-14);
        }
        // Running stats moved toward the batch statistics with weight 0.1.
        assert_relative_eq!(state.running_mean[0], 0.9 * 0.0 + 0.1 * 2.5);
        assert_relative_eq!(state.running_var[0], 0.9 * 1.0 + 0.1 * 1.25);
    }

    #[test]
    fn bessel_factor_applies_to_old_variance() {
        let x = Tensor::from_vec(4, 1, 1, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut state = NormLayerState::new(1).with_bessel(true);
        bn_forward_train(&x, &mut state).unwrap();
        let f = 3.0 / 4.0; // (V-1)/V with V = 4
        assert_relative_eq!(state.running_var[0], 0.9 * f * 1.0 + 0.1 * 1.25);
        assert_relative_eq!(state.running_mean[0], 0.1 * 2.5);
    }

    #[test]
    fn eval_uses_running_stats() {
        let mut rng = SeededRng::new(2);
        let x = Tensor::randn(5, 2, 1, 1, &mut rng);
        let state = NormLayerState::new(2);
        let y = bn_forward_eval(&x, &state);
        for (yv, xv) in y.data().iter().zip(x.data().iter()) {
            assert_relative_eq!(*yv, xv / (1.0f64 + 1e-5).sqrt(), max_relative = 1e-14);
        }

        // x equal to the running mean maps to beta.
        let mut state = NormLayerState::new(2);
        state.running_mean = vec![0.7, -0.3];
        state.beta = vec![5.0, -1.0];
        let x = Tensor::from_fn(3, 2, 1, 1, |_, c, _, _| state.running_mean[c]);
        let y = bn_forward_eval(&x, &state);
        for b in 0..3 {
            assert_relative_eq!(y.get(b, 0, 0, 0), 5.0);
            assert_relative_eq!(y.get(b, 1, 0, 0), -1.0);
        }
    }

    #[test]
    fn eval_matches_train_when_stats_pinned() {
        // Cross-check of the two normalization code paths.
        let mut rng = SeededRng::new(8);
        let x = Tensor::randn(6, 3, 2, 2, &mut rng);
        let (mean, var) = x.channel_stats().unwrap();
        let mut train_state = NormLayerState::new(3);
        let (y_train, _) = bn_forward_train(&x, &mut train_state).unwrap();

        let mut eval_state = NormLayerState::new(3);
        eval_state.running_mean = mean;
        eval_state.running_var = var;
        let y_eval = bn_forward_eval(&x, &eval_state);
        for (a, b) in y_train.data().iter().zip(y_eval.data().iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-14);
        }
    }

    #[test]
    fn zero_upstream_gradient_zeroes_everything() {
        let mut rng = SeededRng::new(4);
        let x = Tensor::randn(4, 2, 2, 2, &mut rng);
        let mut state = NormLayerState::new(2);
        let (_, cache) = bn_forward_train(&x, &mut state).unwrap();
        let zeros = Tensor::zeros(4, 2, 2, 2);
        let (dx, dg, db) = bn_backward(&zeros, cache, &state);
        assert!(dx.data().iter().all(|v| *v == 0.0));
        assert!(dg.iter().all(|v| *v == 0.0));
        assert!(db.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn beta_gradient_is_upstream_sum() {
        let mut rng = SeededRng::new(6);
        let x = Tensor::randn(3, 2, 2, 1, &mut rng);
        let g = Tensor::randn(3, 2, 2, 1, &mut rng);
        let mut state = NormLayerState::new(2);
        let (_, cache) = bn_forward_train(&x, &mut state).unwrap();
        let (_, _, db) = bn_backward(&g, cache, &state);
        for c in 0..2 {
            let mut sum = 0.0;
            for b in 0..3 {
                for h in 0..2 {
                    sum += g.get(b, c, h, 0);
                }
            }
            assert_relative_eq!(db[c], sum, max_relative = 1e-12);
        }
    }

    #[test]
    fn degenerate_batch_rejected() {
        let x = Tensor::zeros(1, 2, 1, 1);
        let mut state = NormLayerState::new(2);
        assert!(matches!(
            bn_forward_train(&x, &mut state),
            Err(Error::DegenerateReduction { count: 1 })
        ));
    }
}
