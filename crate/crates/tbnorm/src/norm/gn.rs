//! Group normalization without an affine stage: each (sample, group) slice is
//! standardized to zero mean and unit variance. Per-sample, so training and
//! evaluation share the same math and there are no running statistics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct GnCache {
    pub(crate) normalized: Tensor,
    /// One inverse standard deviation per (sample, group), row-major.
    pub(crate) inv_std: Vec<f64>,
    pub(crate) groups: usize,
}

fn check_groups(channels: usize, groups: usize) -> Result<usize> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::GroupsNotDivisible { groups, channels });
    }
    Ok(channels / groups)
}

pub fn gn_forward_train(x: &Tensor, groups: usize, epsilon: f64) -> Result<(Tensor, GnCache)> {
    let [b, c, h, w] = x.shape();
    let group_size = check_groups(c, groups)?;
    let spatial = h * w;
    let slice_len = group_size * spatial;

    let mut normalized = Tensor::zeros(b, c, h, w);
    let mut inv_std = vec![0.0; b * groups];
    for bi in 0..b {
        for gi in 0..groups {
            let start = x.index(bi, gi * group_size, 0, 0);
            let slice = &x.data()[start..start + slice_len];
            let mean = slice.iter().sum::<f64>() / slice_len as f64;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / slice_len as f64;
            let inv = 1.0 / (var + epsilon).sqrt();
            inv_std[bi * groups + gi] = inv;
            for (off, v) in slice.iter().enumerate() {
                normalized.data_mut()[start + off] = (v - mean) * inv;
            }
        }
    }
    let out = normalized.clone();
    Ok((
        out,
        GnCache {
            normalized,
            inv_std,
            groups,
        },
    ))
}

/// Per-sample standardization is mode-free; evaluation reuses the training math.
pub fn gn_forward_eval(x: &Tensor, groups: usize, epsilon: f64) -> Result<Tensor> {
    gn_forward_train(x, groups, epsilon).map(|(y, _)| y)
}

pub fn gn_backward(grad_output: &Tensor, cache: GnCache) -> Tensor {
    let GnCache {
        normalized,
        inv_std,
        groups,
    } = cache;
    let [b, c, h, w] = normalized.shape();
    assert_eq!(grad_output.shape(), [b, c, h, w], "gradient shape mismatch");
    let group_size = c / groups;
    let slice_len = group_size * h * w;
    let count = slice_len as f64;

    let mut d_input = Tensor::zeros(b, c, h, w);
    for bi in 0..b {
        for gi in 0..groups {
            let start = normalized.index(bi, gi * group_size, 0, 0);
            let xn = &normalized.data()[start..start + slice_len];
            let g = &grad_output.data()[start..start + slice_len];
            let sum_g: f64 = g.iter().sum();
            let sum_gx: f64 = g.iter().zip(xn).map(|(a, b)| a * b).sum();
            let scale = inv_std[bi * groups + gi] / count;
            for off in 0..slice_len {
                d_input.data_mut()[start + off] =
                    scale * (count * g[off] - sum_g - xn[off] * sum_gx);
            }
        }
    }
    d_input
}
