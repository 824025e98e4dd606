//! Central finite-difference gradient checking.
//!
//! This module is the independent oracle the layer tests are measured
//! against: it never calls a backward pass, only repeated forward
//! evaluations of a scalar loss.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::norm::{BatchComposition, NormKind, NormLayer};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_THRESHOLD: f64 = 1e-4;

/// Floor for the relative-error denominator, guarding against zero gradients.
const DENOM_FLOOR: f64 = 1e-8;

/// Comparison outcome for one named parameter block.
#[derive(Debug, Clone, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub len: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub step: f64,
    pub threshold: f64,
    pub blocks: Vec<BlockReport>,
    pub pass: bool,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` per coordinate.
pub fn central_difference<F>(forward: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grads = Vec::with_capacity(params.len());
    let mut probe = params.to_vec();
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let plus = forward(&probe);
        probe[i] = params[i] - step;
        let minus = forward(&probe);
        probe[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                context: format!("finite-difference probe at coordinate {i}"),
            });
        }
        grads.push((plus - minus) / (2.0 * step));
    }
    Ok(grads)
}

/// Checks the analytic gradient of a scalar map against central differences.
/// `params` is the concatenation of the blocks' variables in order, and
/// `analytic` lists one (name, gradient) pair per block.
pub fn check_gradients<F>(
    forward: F,
    params: &[f64],
    analytic: &[(&str, &[f64])],
    step: f64,
    threshold: f64,
) -> Result<GradReport>
where
    F: Fn(&[f64]) -> f64,
{
    let total: usize = analytic.iter().map(|(_, g)| g.len()).sum();
    assert_eq!(
        total,
        params.len(),
        "analytic blocks must cover the parameter vector"
    );
    if !forward(params).is_finite() {
        return Err(Error::NonFinite {
            context: "forward value at the base point".to_string(),
        });
    }
    let numeric = central_difference(&forward, params, step)?;

    let mut blocks = Vec::with_capacity(analytic.len());
    let mut offset = 0;
    for (name, grad) in analytic {
        let mut max_err: f64 = 0.0;
        let mut sum_err = 0.0;
        for (i, a) in grad.iter().enumerate() {
            let err = relative_error(*a, numeric[offset + i]);
            max_err = max_err.max(err);
            sum_err += err;
        }
        let mean = if grad.is_empty() { 0.0 } else { sum_err / grad.len() as f64 };
        blocks.push(BlockReport {
            name: name.to_string(),
            len: grad.len(),
            max_rel_err: max_err,
            mean_rel_err: mean,
            pass: max_err < threshold,
        });
        offset += grad.len();
    }
    let pass = blocks.iter().all(|b| b.pass);
    Ok(GradReport {
        step,
        threshold,
        blocks,
        pass,
    })
}

/// Configuration for checking one normalization layer end to end.
#[derive(Debug, Clone)]
pub struct LayerCheck {
    pub layer: NormKind,
    pub shape: [usize; 4],
    pub comp: BatchComposition,
    pub groups: usize,
    pub seed: u64,
    pub step: f64,
    pub threshold: f64,
}

impl LayerCheck {
    pub fn new(layer: NormKind, shape: [usize; 4], comp: BatchComposition, seed: u64) -> Self {
        Self {
            layer,
            shape,
            comp,
            groups: 1,
            seed,
            step: DEFAULT_STEP,
            threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Runs a full train-forward of the chosen layer under the scalar loss
/// `L(y) = sum_i (w_i y_i + y_i^2 / 2)` with fixed random weights, and checks
/// the analytic input/gamma/beta gradients against central differences.
pub fn check_norm_layer(cfg: &LayerCheck) -> Result<GradReport> {
    let [b, c, h, w] = cfg.shape;
    assert_eq!(b, cfg.comp.total(), "shape batch must match the composition");
    let n = b * c * h * w;

    let mut rng = SeededRng::new(cfg.seed);
    let x = Tensor::randn(b, c, h, w, &mut rng);
    let gamma: Vec<f64> = (0..c).map(|_| 0.5 + rng.uniform()).collect();
    let beta: Vec<f64> = (0..c).map(|_| rng.normal_scaled(0.0, 0.5)).collect();
    let loss_weights: Vec<f64> = (0..n).map(|_| rng.normal()).collect();

    let mut template = NormLayer::new(cfg.layer, c);
    template.state.groups = cfg.groups;
    let affine = template.has_affine();

    let run_forward = |layer_template: &NormLayer, xv: &[f64], gv: &[f64], bv: &[f64]| {
        let mut layer = layer_template.clone();
        if affine {
            layer.state.gamma = gv.to_vec();
            layer.state.beta = bv.to_vec();
        }
        let input = Tensor::from_vec(b, c, h, w, xv.to_vec()).expect("shape is fixed");
        layer.forward_train(&input, cfg.comp).map(|(y, cache)| (y, cache, layer))
    };

    // Analytic gradients at the base point.
    let (y, cache, layer) = run_forward(&template, x.data(), &gamma, &beta)?;
    let upstream = Tensor::from_vec(
        b,
        c,
        h,
        w,
        y.data()
            .iter()
            .zip(loss_weights.iter())
            .map(|(yv, wv)| wv + yv)
            .collect(),
    )
    .expect("shape is fixed");
    let (dx, dgamma, dbeta) = layer.backward(&upstream, cache);

    // Parameter vector: input, then gamma and beta when the layer has them.
    let mut params = x.data().to_vec();
    if affine {
        params.extend_from_slice(&gamma);
        params.extend_from_slice(&beta);
    }
    let loss = move |theta: &[f64]| -> f64 {
        let (xv, rest) = theta.split_at(n);
        let (gv, bv) = if affine { rest.split_at(c) } else { (&gamma[..], &beta[..]) };
        match run_forward(&template, xv, gv, bv) {
            Ok((y, _cache, _)) => y
                .data()
                .iter()
                .zip(loss_weights.iter())
                .map(|(yv, wv)| wv * yv + 0.5 * yv * yv)
                .sum(),
            Err(_) => f64::NAN,
        }
    };

    let mut blocks: Vec<(&str, &[f64])> = vec![("input", dx.data())];
    if affine {
        blocks.push(("gamma", &dgamma));
        blocks.push(("beta", &dbeta));
    }
    check_gradients(loss, &params, &blocks, cfg.step, cfg.threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        let params = [1.5, -2.0, 0.25, 3.0];
        let analytic: Vec<f64> = params.iter().map(|p| 2.0 * p).collect();
        let f = |p: &[f64]| p.iter().map(|v| v * v).sum::<f64>();
        let report =
            check_gradients(f, &params, &[("theta", &analytic)], 1e-5, 1e-8).unwrap();
        assert!(report.pass, "max err {}", report.max_rel_err());
    }

    #[test]
    fn linear_is_step_independent() {
        let params = [0.3, -1.2, 4.0];
        let coeffs = [2.0, -0.5, 1.25];
        let f = |p: &[f64]| p.iter().zip(coeffs.iter()).map(|(a, b)| a * b).sum::<f64>();
        let mut previous: Option<Vec<f64>> = None;
        for step in [1e-3, 1e-4, 1e-5, 1e-6] {
            let grads = central_difference(f, &params, step).unwrap();
            for (g, c) in grads.iter().zip(coeffs.iter()) {
                assert_relative_eq!(g, c, max_relative = 1e-8);
            }
            if let Some(prev) = &previous {
                for (a, b) in grads.iter().zip(prev.iter()) {
                    assert_relative_eq!(a, b, max_relative = 1e-8);
                }
            }
            previous = Some(grads);
        }
    }

    #[test]
    fn halving_step_does_not_blow_up() {
        // Sanity guard against cancellation regimes on a smooth map.
        let params: Vec<f64> = (0..6).map(|i| 0.4 + 0.17 * i as f64).collect();
        let f = |p: &[f64]| p.iter().map(|v| (v.sin() + 1.5).ln()).sum::<f64>();
        let analytic: Vec<f64> = params.iter().map(|v| v.cos() / (v.sin() + 1.5)).collect();
        let mut prev_max = None;
        for step in [4e-4, 2e-4, 1e-4, 5e-5] {
            let report =
                check_gradients(f, &params, &[("theta", &analytic)], step, 1e-3).unwrap();
            let max = report.max_rel_err().max(1e-14);
            if let Some(prev) = prev_max {
                assert!(max <= 10.0 * prev, "step {step}: {max} vs {prev}");
            }
            prev_max = Some(max);
        }
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let f = |p: &[f64]| if p[0] > 1.0 { f64::NAN } else { p[0] };
        let err = check_gradients(f, &[2.0], &[("theta", &[1.0])], 1e-5, 1e-4).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn every_layer_passes_at_default_threshold() {
        for (kind, groups) in [
            (NormKind::Bn, 1usize),
            (NormKind::Gn, 2),
            (NormKind::Cn, 2),
            (NormKind::Tbbn, 1),
        ] {
            let comp = if matches!(kind, NormKind::Tbbn) {
                BatchComposition::new(8, 4, 3)
            } else {
                BatchComposition::single_task(12)
            };
            let cfg = LayerCheck::new(kind, [12, 4, 2, 2], comp, 99).with_groups(groups);
            let report = check_norm_layer(&cfg).unwrap();
            assert!(
                report.pass,
                "{kind}: max rel err {}",
                report.max_rel_err()
            );
        }
    }

    #[test]
    fn tbbn_composite_regression_fixture() {
        // Shape (12,4,2,2) at t = 3 passes at the default threshold; recorded
        // here as the fixture the layer suite is pinned against.
        let cfg = LayerCheck::new(
            NormKind::Tbbn,
            [12, 4, 2, 2],
            BatchComposition::new(8, 4, 3),
            1234,
        );
        let report = check_norm_layer(&cfg).unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err());
        assert_eq!(report.blocks.len(), 3);
    }

    #[test]
    fn tbbn_ablation_variants_all_pass() {
        use crate::norm::AblationFlags;
        for case in 1..=4usize {
            let flags = AblationFlags::ablation_case(case);
            let comp = BatchComposition::new(8, 4, 3);
            let cfg = LayerCheck::new(NormKind::Tbbn, [12, 4, 2, 2], comp, 7 + case as u64);
            // Rebuild with flags by hand: check_norm_layer clones the template.
            let [b, c, h, w] = cfg.shape;
            let n = b * c * h * w;
            let mut rng = SeededRng::new(cfg.seed);
            let x = Tensor::randn(b, c, h, w, &mut rng);
            let gamma: Vec<f64> = (0..c).map(|_| 0.5 + rng.uniform()).collect();
            let beta: Vec<f64> = (0..c).map(|_| rng.normal_scaled(0.0, 0.5)).collect();
            let weights: Vec<f64> = (0..n).map(|_| rng.normal()).collect();

            let forward = |theta: &[f64]| -> f64 {
                let (xv, rest) = theta.split_at(n);
                let (gv, bv) = rest.split_at(c);
                let mut layer = NormLayer::new(NormKind::Tbbn, c);
                layer.state.ablation = flags;
                layer.state.gamma = gv.to_vec();
                layer.state.beta = bv.to_vec();
                let input = Tensor::from_vec(b, c, h, w, xv.to_vec()).unwrap();
                let (y, _) = layer.forward_train(&input, comp).unwrap();
                y.data()
                    .iter()
                    .zip(weights.iter())
                    .map(|(yv, wv)| wv * yv + 0.5 * yv * yv)
                    .sum()
            };

            let mut layer = NormLayer::new(NormKind::Tbbn, c);
            layer.state.ablation = flags;
            layer.state.gamma = gamma.clone();
            layer.state.beta = beta.clone();
            let (y, cache) = layer.forward_train(&x, comp).unwrap();
            let upstream = Tensor::from_vec(
                b,
                c,
                h,
                w,
                y.data().iter().zip(weights.iter()).map(|(yv, wv)| wv + yv).collect(),
            )
            .unwrap();
            let (dx, dg, db) = layer.backward(&upstream, cache);

            let mut params = x.data().to_vec();
            params.extend_from_slice(&gamma);
            params.extend_from_slice(&beta);
            let report = check_gradients(
                forward,
                &params,
                &[("input", dx.data()), ("gamma", &dg), ("beta", &db)],
                DEFAULT_STEP,
                DEFAULT_THRESHOLD,
            )
            .unwrap();
            assert!(report.pass, "case {case}: max rel err {}", report.max_rel_err());
        }
    }
}
