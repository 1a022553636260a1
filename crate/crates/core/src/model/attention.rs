//! Masked scaled-dot-product attention.
//!
//! Logits are `q·k / (τ·√head_dim)`. Disallowed keys are dropped from the
//! softmax entirely; a query with no visible key produces a zero row.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::{AttentionMask, ModelError};
use crate::tensor::{dot, Matrix};

/// Which attention implementation the forward pass runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kernel", rename_all = "lowercase")]
pub enum AttentionKernel {
    /// Materializes the full score matrix.
    Naive,
    /// Streams key tiles with running max/sum rescaling and skips tiles the
    /// mask hides completely.
    Tiled { tile: usize },
}

impl Default for AttentionKernel {
    fn default() -> Self {
        AttentionKernel::Tiled { tile: 64 }
    }
}

impl AttentionKernel {
    /// Scratch elements a kernel needs for `len` tokens.
    pub(crate) fn scratch_len(&self, len: usize) -> usize {
        match *self {
            AttentionKernel::Naive => len * len,
            AttentionKernel::Tiled { tile } => tile.max(1).min(len.max(1)),
        }
    }
}

/// A `rows × width` window into a row-major buffer with row stride `stride`.
#[derive(Clone, Copy)]
pub(crate) struct HeadView<'a, T> {
    pub data: &'a [T],
    pub stride: usize,
    pub offset: usize,
    pub width: usize,
}

impl<'a, T> HeadView<'a, T> {
    pub fn dense(data: &'a [T], width: usize) -> Self {
        Self { data, stride: width, offset: 0, width }
    }

    #[inline]
    fn row(&self, i: usize) -> &'a [T] {
        let start = i * self.stride + self.offset;
        &self.data[start..start + self.width]
    }
}

pub(crate) struct HeadOut<'a, T> {
    pub data: &'a mut [T],
    pub stride: usize,
    pub offset: usize,
    pub width: usize,
}

impl<T> HeadOut<'_, T> {
    #[inline]
    fn row(&mut self, i: usize) -> &mut [T] {
        let start = i * self.stride + self.offset;
        &mut self.data[start..start + self.width]
    }
}

pub(crate) fn logit_scale<T: Float>(tau: T, head_dim: usize) -> T {
    T::one() / (tau * T::from(head_dim).expect("head_dim fits").sqrt())
}

/// Reference kernel: fills `scores` (`len × len`) then normalizes row by row.
#[allow(clippy::too_many_arguments)]
pub(crate) fn naive_kernel<T: Float>(
    q: HeadView<'_, T>,
    k: HeadView<'_, T>,
    v: HeadView<'_, T>,
    len: usize,
    mask: &impl AttentionMask,
    scale: T,
    scores: &mut [T],
    mut out: HeadOut<'_, T>,
) {
    let scores = &mut scores[..len * len];
    for i in 0..len {
        let qi = q.row(i);
        for j in 0..len {
            scores[i * len + j] = if mask.allows(i, j) { dot(qi, k.row(j)) * scale } else { T::neg_infinity() };
        }
    }
    for i in 0..len {
        let row = &mut scores[i * len..(i + 1) * len];
        let out_row = out.row(i);
        out_row.iter_mut().for_each(|o| *o = T::zero());
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            continue;
        }
        let mut sum = T::zero();
        for s in row.iter_mut() {
            *s = if *s == T::neg_infinity() { T::zero() } else { (*s - max).exp() };
            sum = sum + *s;
        }
        for (j, &w) in row.iter().enumerate() {
            if !mask.allows(i, j) {
                continue;
            }
            let p = w / sum;
            for (o, &vj) in out_row.iter_mut().zip(v.row(j)) {
                *o = *o + p * vj;
            }
        }
    }
}

/// Single pass over key tiles per query with online softmax rescaling.
/// `scratch` must hold at least `tile` elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn tiled_kernel<T: Float>(
    q: HeadView<'_, T>,
    k: HeadView<'_, T>,
    v: HeadView<'_, T>,
    len: usize,
    mask: &impl AttentionMask,
    scale: T,
    tile: usize,
    scratch: &mut [T],
    mut out: HeadOut<'_, T>,
) {
    let tile = tile.clamp(1, len.max(1));
    let logits = &mut scratch[..tile];
    for i in 0..len {
        let qi = q.row(i);
        let acc = out.row(i);
        acc.iter_mut().for_each(|a| *a = T::zero());
        let mut running_max = T::neg_infinity();
        let mut running_sum = T::zero();
        let mut start = 0;
        while start < len {
            let end = (start + tile).min(len);
            if mask.allows_any(i, start..end) {
                let mut tile_max = T::neg_infinity();
                for (slot, j) in logits.iter_mut().zip(start..end) {
                    *slot = if mask.allows(i, j) {
                        let s = dot(qi, k.row(j)) * scale;
                        tile_max = tile_max.max(s);
                        s
                    } else {
                        T::neg_infinity()
                    };
                }
                let new_max = running_max.max(tile_max);
                if running_max != T::neg_infinity() && new_max > running_max {
                    let correction = (running_max - new_max).exp();
                    running_sum = running_sum * correction;
                    acc.iter_mut().for_each(|a| *a = *a * correction);
                }
                running_max = new_max;
                for (&s, j) in logits.iter().zip(start..end) {
                    if s == T::neg_infinity() {
                        continue;
                    }
                    let p = (s - new_max).exp();
                    running_sum = running_sum + p;
                    for (a, &vj) in acc.iter_mut().zip(v.row(j)) {
                        *a = *a + p * vj;
                    }
                }
            }
            start = end;
        }
        if running_sum > T::zero() {
            acc.iter_mut().for_each(|a| *a = *a / running_sum);
        }
    }
}

fn check_inputs<T: Float>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: &impl AttentionMask,
    tau: T,
) -> Result<(), ModelError> {
    let len = q.rows();
    if k.rows() != len || v.rows() != len || mask.size() != len {
        return Err(ModelError::Shape(format!(
            "q/k/v/mask lengths {}/{}/{}/{} differ",
            len,
            k.rows(),
            v.rows(),
            mask.size()
        )));
    }
    if q.cols() != k.cols() || q.cols() == 0 {
        return Err(ModelError::Shape(format!(
            "query width {} and key width {} must match and be positive",
            q.cols(),
            k.cols()
        )));
    }
    if !(tau > T::zero()) {
        return Err(ModelError::InvalidConfig("temperature must be positive".into()));
    }
    Ok(())
}

/// Fully materialized masked attention; the oracle for [`attention_tiled`].
pub fn attention_naive<T: Float>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: &impl AttentionMask,
    tau: T,
) -> Result<Matrix<T>, ModelError> {
    check_inputs(q, k, v, mask, tau)?;
    let len = q.rows();
    let mut out = Matrix::zeros(len, v.cols());
    let mut scores = vec![T::zero(); len * len];
    let width = v.cols();
    naive_kernel(
        HeadView::dense(q.as_slice(), q.cols()),
        HeadView::dense(k.as_slice(), k.cols()),
        HeadView::dense(v.as_slice(), width),
        len,
        mask,
        logit_scale(tau, q.cols()),
        &mut scores,
        HeadOut { data: out.as_mut_slice(), stride: width, offset: 0, width },
    );
    Ok(out)
}

/// Streaming masked attention over key tiles of width `tile` (`1 ≤ tile ≤ len`).
pub fn attention_tiled<T: Float>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    mask: &impl AttentionMask,
    tau: T,
    tile: usize,
) -> Result<Matrix<T>, ModelError> {
    check_inputs(q, k, v, mask, tau)?;
    let len = q.rows();
    if tile == 0 || (len > 0 && tile > len) {
        return Err(ModelError::Shape(format!("tile {tile} outside 1..={len}")));
    }
    let mut out = Matrix::zeros(len, v.cols());
    let mut scratch = vec![T::zero(); tile];
    let width = v.cols();
    tiled_kernel(
        HeadView::dense(q.as_slice(), q.cols()),
        HeadView::dense(k.as_slice(), k.cols()),
        HeadView::dense(v.as_slice(), width),
        len,
        mask,
        logit_scale(tau, q.cols()),
        tile,
        &mut scratch,
        HeadOut { data: out.as_mut_slice(), stride: width, offset: 0, width },
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DenseMask, SumiMask};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random<T: Float>(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix<T> {
        Matrix::from_fn(rows, cols, |_, _| T::from(rng.random_range(-1.0..1.0)).unwrap())
    }

    #[test]
    fn singleton_returns_value_row() {
        let q = Matrix::from_rows(&[vec![0.3, -2.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![1.5, 0.25]]).unwrap();
        let v = Matrix::from_rows(&[vec![7.0, -3.0]]).unwrap();
        let mask = SumiMask::new(0, 1);
        assert_eq!(attention_naive(&q, &k, &v, &mask, 1.0).unwrap(), v);
        assert_eq!(attention_tiled(&q, &k, &v, &mask, 1.0, 1).unwrap(), v);
    }

    #[test]
    fn hand_evaluated_candidate_row() {
        // H=1, C=1, head_dim=1, Q=K=V=[[1],[2]], τ=1.
        // Candidate logits over keys {0, 1}: [2·1, 2·2] = [2, 4].
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let mask = SumiMask::new(1, 1);
        let out = attention_naive(&x, &x, &x, &mask, 1.0).unwrap();
        let (e2, e4) = (2f64.exp(), 4f64.exp());
        let expected = (e2 * 1.0 + e4 * 2.0) / (e2 + e4);
        assert!((expected - 1.880_797_077_977_882).abs() < 1e-15);
        assert!((out.get(1, 0) - expected).abs() < 1e-15);
        // History row only sees itself.
        assert_eq!(out.get(0, 0), 1.0);
        let tiled = attention_tiled(&x, &x, &x, &mask, 1.0, 1).unwrap();
        assert!((tiled.get(1, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn temperature_irrelevant_when_logits_are_equal() {
        // All keys identical → every visible logit in a row is equal.
        let q = Matrix::from_rows(&[vec![0.5, 1.0], vec![-1.0, 2.0], vec![3.0, 0.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let v = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let mask = SumiMask::new(2, 1);
        let a = attention_naive(&q, &k, &v, &mask, 1.0).unwrap();
        let b = attention_naive(&q, &k, &v, &mask, 2.0).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-15);
    }

    #[test]
    fn tiled_matches_naive_single_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (len, hd) = (64, 16);
        let q = random::<f32>(&mut rng, len, hd);
        let k = random::<f32>(&mut rng, len, hd);
        let v = random::<f32>(&mut rng, len, hd);
        let mask = SumiMask::new(40, 24);
        let naive = attention_naive(&q, &k, &v, &mask, 1.3).unwrap();
        let tiled = attention_tiled(&q, &k, &v, &mask, 1.3, 8).unwrap();
        assert!(tiled.max_abs_diff(&naive).unwrap() <= 1e-5);
        let one = attention_tiled(&q, &k, &v, &mask, 1.3, 1).unwrap();
        let full = attention_tiled(&q, &k, &v, &mask, 1.3, len).unwrap();
        assert!(one.max_abs_diff(&full).unwrap() <= 1e-5);
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let mask = DenseMask::from_fn(2, |i, j| i == 1 && j == 0);
        let naive = attention_naive(&x, &x, &x, &mask, 1.0).unwrap();
        let tiled = attention_tiled(&x, &x, &x, &mask, 1.0, 2).unwrap();
        assert_eq!(naive.row(0), &[0.0]);
        assert_eq!(naive.row(1), &[1.0]);
        assert_eq!(tiled, naive);
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = Matrix::<f64>::zeros(3, 2);
        let mask = SumiMask::new(2, 2);
        assert!(attention_naive(&x, &x, &x, &mask, 1.0).is_err());
        let mask = SumiMask::new(2, 1);
        assert!(attention_naive(&x, &x, &x, &mask, 0.0).is_err());
        assert!(attention_tiled(&x, &x, &x, &mask, 1.0, 0).is_err());
        assert!(attention_tiled(&x, &x, &x, &mask, 1.0, 4).is_err());
        let narrow = Matrix::<f64>::zeros(3, 1);
        assert!(attention_naive(&x, &narrow, &x, &mask, 1.0).is_err());
    }

    #[test]
    fn masked_weights_sum_to_one() {
        // With V = all-ones, each output row is the sum of its softmax weights.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (len, hd) = (37, 5);
        let q = random::<f64>(&mut rng, len, hd);
        let k = random::<f64>(&mut rng, len, hd);
        let ones = Matrix::from_fn(len, 1, |_, _| 1.0);
        let mask = SumiMask::new(30, 7);
        for out in [
            attention_naive(&q, &k, &ones, &mask, 0.7).unwrap(),
            attention_tiled(&q, &k, &ones, &mask, 0.7, 4).unwrap(),
        ] {
            for i in 0..len {
                assert!((out.get(i, 0) - 1.0).abs() <= 1e-12);
            }
        }
    }
}
