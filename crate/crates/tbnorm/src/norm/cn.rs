//! Continual normalization: group normalization over channels (no affine)
//! followed by batch normalization over the batch. The batch-norm stage owns
//! gamma/beta and the running statistics.

use crate::error::Result;
use crate::norm::bn::{bn_backward, bn_forward_eval, bn_forward_train, BnCache};
use crate::norm::gn::{gn_backward, gn_forward_eval, gn_forward_train, GnCache};
use crate::norm::NormLayerState;
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct CnCache {
    gn: GnCache,
    bn: BnCache,
}

pub fn cn_forward_train(x: &Tensor, state: &mut NormLayerState) -> Result<(Tensor, CnCache)> {
    let (z, gn_cache) = gn_forward_train(x, state.groups, state.epsilon)?;
    let (y, bn_cache) = bn_forward_train(&z, state)?;
    Ok((
        y,
        CnCache {
            gn: gn_cache,
            bn: bn_cache,
        },
    ))
}

pub fn cn_forward_eval(x: &Tensor, state: &NormLayerState) -> Result<Tensor> {
    let z = gn_forward_eval(x, state.groups, state.epsilon)?;
    Ok(bn_forward_eval(&z, state))
}

pub fn cn_backward(
    grad_output: &Tensor,
    cache: CnCache,
    state: &NormLayerState,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let CnCache { gn, bn } = cache;
    let (d_mid, d_gamma, d_beta) = bn_backward(grad_output, bn, state);
    let d_input = gn_backward(&d_mid, gn);
    (d_input, d_gamma, d_beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::gn::gn_forward_train;
    use crate::rng::SeededRng;

    #[test]
    fn composition_matches_stagewise_application() {
        // G = 1, one sample repeated across the batch: CN equals BN applied
        // to the group-normalized batch.
        let mut rng = SeededRng::new(20);
        let row = Tensor::randn(1, 4, 2, 2, &mut rng);
        let mut x = row.clone();
        for _ in 0..3 {
            x = x.concat_batch(&row).unwrap();
        }
        let mut state = NormLayerState::new(4).with_groups(1);
        let (cn_y, _) = cn_forward_train(&x, &mut state).unwrap();

        let (z, _) = gn_forward_train(&x, 1, 1e-5).unwrap();
        let mut bn_state = NormLayerState::new(4).with_groups(1);
        let (bn_y, _) = bn_forward_train(&z, &mut bn_state).unwrap();
        assert_eq!(cn_y, bn_y);
        assert_eq!(state.running_mean, bn_state.running_mean);
    }

    #[test]
    fn eval_is_deterministic() {
        let mut rng = SeededRng::new(22);
        let x = Tensor::randn(5, 4, 1, 3, &mut rng);
        let mut state = NormLayerState::new(4).with_groups(2);
        cn_forward_train(&x, &mut state).unwrap();
        let a = cn_forward_eval(&x, &state).unwrap();
        let b = cn_forward_eval(&x, &state).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_groups_propagates() {
        let x = Tensor::zeros(2, 6, 1, 1);
        let mut state = NormLayerState::new(6).with_groups(5);
        assert!(cn_forward_train(&x, &mut state).is_err());
    }
}
