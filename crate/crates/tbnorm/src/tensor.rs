//! Dense rank-4 tensors in batch x channel x height x width layout.
//!
//! The reshape/repeat/average operations here carry exact layout contracts:
//! the task-balanced normalization layer depends on `reshape_split` being the
//! contiguous row-major reinterpretation and on `repeat_channels` tiling (not
//! interleaving) the channel axis.

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Dense rank-4 tensor. Data is stored row-major in n -> c -> h -> w order,
/// so `flat = ((n*C + c)*H + h)*W + w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            shape: [batch, channels, height, width],
            data: vec![0.0; batch * channels * height * width],
        }
    }

    pub fn from_vec(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let expected = batch * channels * height * width;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected} elements for ({batch},{channels},{height},{width})"),
                got: format!("{} elements", data.len()),
            });
        }
        Ok(Self {
            shape: [batch, channels, height, width],
            data,
        })
    }

    pub fn from_fn(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(batch * channels * height * width);
        for b in 0..batch {
            for c in 0..channels {
                for h in 0..height {
                    for w in 0..width {
                        data.push(f(b, c, h, w));
                    }
                }
            }
        }
        Self {
            shape: [batch, channels, height, width],
            data,
        }
    }

    /// Standard-normal entries drawn from `rng`.
    pub fn randn(batch: usize, channels: usize, height: usize, width: usize, rng: &mut SeededRng) -> Self {
        let n = batch * channels * height * width;
        let data = (0..n).map(|_| rng.normal()).collect();
        Self {
            shape: [batch, channels, height, width],
            data,
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Number of spatial positions per channel (H*W).
    pub fn spatial(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(b, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.index(b, c, h, w);
        self.data[i] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Splits the batch axis into `r` channel groups: `(B, C, H, W)` becomes
    /// `(B/r, C*r, H, W)`. Element `(b, c, h, w)` lands at
    /// `(b / r, (b % r)*C + c, h, w)`, which is the contiguous row-major
    /// reinterpretation of the same buffer.
    pub fn reshape_split(&self, r: usize) -> Result<Tensor> {
        let [b, c, h, w] = self.shape;
        if r == 0 || b % r != 0 {
            return Err(Error::BatchNotDivisible { batch: b, r });
        }
        Ok(Tensor {
            shape: [b / r, c * r, h, w],
            data: self.data.clone(),
        })
    }

    /// Exact inverse of [`reshape_split`](Self::reshape_split):
    /// `(B, C*r, H, W)` becomes `(B*r, C, H, W)` over the same buffer.
    pub fn reshape_merge(&self, r: usize) -> Result<Tensor> {
        let [b, c, h, w] = self.shape;
        if r == 0 || c % r != 0 {
            return Err(Error::ChannelsNotDivisible { channels: c, r });
        }
        Ok(Tensor {
            shape: [b * r, c / r, h, w],
            data: self.data.clone(),
        })
    }

    /// Tiles the channel axis `r` times: output `(b, k*C + c, h, w)` equals
    /// input `(b, c, h, w)` for every block `k < r`.
    pub fn repeat_channels(&self, r: usize) -> Result<Tensor> {
        if r == 0 {
            return Err(Error::ChannelsNotDivisible {
                channels: self.shape[1],
                r,
            });
        }
        let [b, c, h, w] = self.shape;
        let block = c * h * w;
        let mut data = Vec::with_capacity(self.data.len() * r);
        for bi in 0..b {
            let row = &self.data[bi * block..(bi + 1) * block];
            for _ in 0..r {
                data.extend_from_slice(row);
            }
        }
        Ok(Tensor {
            shape: [b, c * r, h, w],
            data,
        })
    }

    /// Averages `r` equally sized channel blocks:
    /// output `(b, c, h, w) = (1/r) * sum_k input(b, k*C + c, h, w)`.
    ///
    /// The mean is accumulated incrementally (`m += (x - m)/k`), which makes
    /// averaging identical copies return them bit-exactly for every `r`;
    /// plain sum-then-divide does not for r = 3.
    pub fn average_channel_groups(&self, r: usize) -> Result<Tensor> {
        let [b, cr, h, w] = self.shape;
        if r == 0 || cr % r != 0 {
            return Err(Error::ChannelsNotDivisible { channels: cr, r });
        }
        let c = cr / r;
        let block = c * h * w;
        let mut out = Tensor::zeros(b, c, h, w);
        for bi in 0..b {
            let in_row = &self.data[bi * cr * h * w..(bi + 1) * cr * h * w];
            let out_row = &mut out.data[bi * block..(bi + 1) * block];
            out_row.copy_from_slice(&in_row[..block]);
            for k in 1..r {
                let blk = &in_row[k * block..(k + 1) * block];
                let count = (k + 1) as f64;
                for (mean, v) in out_row.iter_mut().zip(blk) {
                    *mean += (v - *mean) / count;
                }
            }
        }
        Ok(out)
    }

    /// Concatenates along the batch axis; rows of `self` precede rows of `other`.
    pub fn concat_batch(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape[1..] != other.shape[1..] {
            return Err(Error::ShapeMismatch {
                expected: format!("(*, {}, {}, {})", self.shape[1], self.shape[2], self.shape[3]),
                got: format!(
                    "(*, {}, {}, {})",
                    other.shape[1], other.shape[2], other.shape[3]
                ),
            });
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Tensor {
            shape: [
                self.shape[0] + other.shape[0],
                self.shape[1],
                self.shape[2],
                self.shape[3],
            ],
            data,
        })
    }

    /// Exact inverse of [`concat_batch`](Self::concat_batch): splits the first
    /// `front` rows from the rest.
    pub fn split_batch(&self, front: usize) -> Result<(Tensor, Tensor)> {
        let [b, c, h, w] = self.shape;
        if front > b {
            return Err(Error::ShapeMismatch {
                expected: format!("front <= {b}"),
                got: format!("front = {front}"),
            });
        }
        let cut = front * c * h * w;
        Ok((
            Tensor {
                shape: [front, c, h, w],
                data: self.data[..cut].to_vec(),
            },
            Tensor {
                shape: [b - front, c, h, w],
                data: self.data[cut..].to_vec(),
            },
        ))
    }

    /// Per-channel empirical mean and biased variance (divisor B*H*W).
    pub fn channel_stats(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let [b, c, h, w] = self.shape;
        let count = b * h * w;
        if count == 0 {
            return Err(Error::EmptyReduction);
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let start = self.index(bi, ci, 0, 0);
                for v in &self.data[start..start + h * w] {
                    mean[ci] += v;
                }
            }
        }
        let inv = 1.0 / count as f64;
        for m in mean.iter_mut() {
            *m *= inv;
        }
        for bi in 0..b {
            for ci in 0..c {
                let start = self.index(bi, ci, 0, 0);
                for v in &self.data[start..start + h * w] {
                    let d = v - mean[ci];
                    var[ci] += d * d;
                }
            }
        }
        for v in var.iter_mut() {
            *v *= inv;
        }
        Ok((mean, var))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn counting(b: usize, c: usize, h: usize, w: usize) -> Tensor {
        let n = b * c * h * w;
        Tensor::from_vec(b, c, h, w, (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn reshape_split_layout() {
        // (6,2,1,1) with r=3: input batch row 4, channel 1 lands at
        // batch 4/3 = 1, channel (4%3)*2 + 1 = 3.
        let x = counting(6, 2, 1, 1);
        let y = x.reshape_split(3).unwrap();
        assert_eq!(y.shape(), [2, 6, 1, 1]);
        assert_eq!(y.get(1, 3, 0, 0), x.get(4, 1, 0, 0));
        // Full layout law against the index formula.
        for b in 0..6 {
            for c in 0..2 {
                assert_eq!(y.get(b / 3, (b % 3) * 2 + c, 0, 0), x.get(b, c, 0, 0));
            }
        }
    }

    #[test]
    fn reshape_split_brute_force_oracle() {
        // Enumerate small shapes and check against the flat-index rule.
        for (b, c, h, w, r) in [(4, 3, 2, 2, 2), (6, 1, 1, 3, 3), (8, 2, 2, 1, 4), (2, 5, 1, 1, 1)] {
            let x = counting(b, c, h, w);
            let y = x.reshape_split(r).unwrap();
            for bi in 0..b {
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            let expect = x.get(bi, ci, hi, wi);
                            assert_eq!(y.get(bi / r, (bi % r) * c + ci, hi, wi), expect);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn reshape_split_identity_and_errors() {
        let x = counting(6, 2, 1, 1);
        assert_eq!(x.reshape_split(1).unwrap(), x);
        let err = x.reshape_split(4).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('6') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn reshape_merge_inverts_split() {
        let mut rng = SeededRng::new(11);
        for r in [1usize, 2, 4] {
            let x = Tensor::randn(8, 3, 2, 2, &mut rng);
            let back = x.reshape_split(r).unwrap().reshape_merge(r).unwrap();
            assert_eq!(back, x);
        }
        let y = counting(2, 6, 1, 1).reshape_merge(3).unwrap();
        assert_eq!(y.shape(), [6, 2, 1, 1]);
        assert_eq!(counting(2, 6, 1, 1).reshape_merge(1).unwrap().shape(), [2, 6, 1, 1]);
    }

    #[test]
    fn repeat_channels_tiles() {
        let x = counting(2, 2, 1, 1);
        let y = x.repeat_channels(3).unwrap();
        assert_eq!(y.shape(), [2, 6, 1, 1]);
        for b in 0..2 {
            for k in 0..3 {
                for c in 0..2 {
                    assert_eq!(y.get(b, k * 2 + c, 0, 0), x.get(b, c, 0, 0));
                }
            }
        }
        assert_eq!(x.repeat_channels(1).unwrap(), x);
    }

    #[test]
    fn repeat_preserves_block_means() {
        let mut rng = SeededRng::new(3);
        let x = Tensor::randn(4, 2, 2, 2, &mut rng);
        let y = x.repeat_channels(3).unwrap();
        let (mx, _) = x.channel_stats().unwrap();
        let (my, _) = y.channel_stats().unwrap();
        for k in 0..3 {
            for c in 0..2 {
                assert_relative_eq!(my[k * 2 + c], mx[c], max_relative = 1e-15);
            }
        }
    }

    #[test]
    fn average_channel_groups_basics() {
        let mut rng = SeededRng::new(5);
        let x = Tensor::randn(3, 4, 2, 1, &mut rng);
        for r in [1usize, 2, 4] {
            let avg = x.repeat_channels(r).unwrap().average_channel_groups(r).unwrap();
            assert_eq!(avg, x, "average of identical copies must be exact");
        }
        let two = Tensor::from_vec(1, 2, 1, 1, vec![1.0, 3.0]).unwrap();
        let avg = two.average_channel_groups(2).unwrap();
        assert_eq!(avg.get(0, 0, 0, 0), 2.0);
        assert!(x.average_channel_groups(3).is_err());
    }

    #[test]
    fn concat_and_split_batch() {
        let a = counting(2, 3, 1, 2);
        let b = counting(3, 3, 1, 2);
        let joined = a.concat_batch(&b).unwrap();
        assert_eq!(joined.shape(), [5, 3, 1, 2]);
        let (fa, fb) = joined.split_batch(2).unwrap();
        assert_eq!(fa, a);
        assert_eq!(fb, b);

        let empty = Tensor::zeros(0, 3, 1, 2);
        assert_eq!(a.concat_batch(&empty).unwrap(), a);

        let bad = counting(2, 4, 1, 2);
        assert!(a.concat_batch(&bad).is_err());
    }

    #[test]
    fn channel_stats_matches_hand_values() {
        let constant = Tensor::from_fn(3, 2, 2, 2, |_, _, _, _| 5.0);
        let (mean, var) = constant.channel_stats().unwrap();
        assert_eq!(mean, vec![5.0, 5.0]);
        assert_eq!(var, vec![0.0, 0.0]);

        // Single channel {1,2,3,4}: mean 2.5, biased variance 1.25.
        let x = Tensor::from_vec(4, 1, 1, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (mean, var) = x.channel_stats().unwrap();
        assert_relative_eq!(mean[0], 2.5);
        assert_relative_eq!(var[0], 1.25);
    }

    #[test]
    fn channel_stats_permutation_invariant() {
        let mut rng = SeededRng::new(9);
        let x = Tensor::randn(5, 3, 2, 2, &mut rng);
        let mut permuted = Tensor::zeros(5, 3, 2, 2);
        let order = [3usize, 0, 4, 1, 2];
        for (dst, &src) in order.iter().enumerate() {
            for c in 0..3 {
                for h in 0..2 {
                    for w in 0..2 {
                        permuted.set(dst, c, h, w, x.get(src, c, h, w));
                    }
                }
            }
        }
        let (m1, v1) = x.channel_stats().unwrap();
        let (m2, v2) = permuted.channel_stats().unwrap();
        for c in 0..3 {
            assert_relative_eq!(m1[c], m2[c], max_relative = 1e-12);
            assert_relative_eq!(v1[c], v2[c], max_relative = 1e-12);
        }
    }

    #[test]
    fn channel_stats_naive_oracle() {
        // Naive double-loop oracle on random tensors up to (16,8,4,4).
        let mut rng = SeededRng::new(21);
        for (b, c, h, w) in [(16, 8, 4, 4), (3, 2, 1, 1), (7, 5, 2, 3)] {
            let x = Tensor::randn(b, c, h, w, &mut rng);
            let (mean, var) = x.channel_stats().unwrap();
            for ci in 0..c {
                let mut values = Vec::new();
                for bi in 0..b {
                    for hi in 0..h {
                        for wi in 0..w {
                            values.push(x.get(bi, ci, hi, wi));
                        }
                    }
                }
                let m: f64 = values.iter().sum::<f64>() / values.len() as f64;
                let v: f64 =
                    values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / values.len() as f64;
                assert_relative_eq!(mean[ci], m, max_relative = 1e-12);
                assert_relative_eq!(var[ci], v, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn channel_stats_empty_domain_errors() {
        let empty = Tensor::zeros(0, 3, 1, 1);
        assert!(matches!(empty.channel_stats(), Err(Error::EmptyReduction)));
    }
}
