//! Block-local goodness losses and the cross-entropy baseline.
//!
//! All three share one softmax-margin kernel: per sample
//! `-(s[label] - logsumexp(s))`, with gradient `(softmax(s) - onehot) / B`.
//! The goodness losses differ only in where the scores come from.

use crate::error::{Error, Result};
use crate::goodness::GoodnessMatrix;
use crate::real::Real;
use crate::tensor::{log_sum_exp, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T> {
    /// Batch mean of `per_sample`.
    pub scalar: T,
    pub per_sample: Tensor<T>,
}

fn softmax_margin<T: Real>(
    scores: &Tensor<T>,
    labels: &[usize],
    op: &'static str,
) -> Result<(LossValue<T>, Tensor<T>)> {
    let [b, j] = scores.dims2(op)?;
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            op,
            expected: vec![b],
            got: vec![labels.len()],
        });
    }
    scores.ensure_finite(op)?;
    let inv_b = T::one() / T::from_usize(b).unwrap();
    let mut per = Vec::with_capacity(b);
    let mut grad = Vec::with_capacity(b * j);
    for (row, &label) in scores.data().chunks_exact(j).zip(labels) {
        if label >= j {
            return Err(Error::LabelOutOfRange { label, classes: j });
        }
        let lse = log_sum_exp(row);
        per.push(-(row[label] - lse));
        for (k, &s) in row.iter().enumerate() {
            let p = (s - lse).exp();
            let onehot = if k == label { T::one() } else { T::zero() };
            grad.push((p - onehot) * inv_b);
        }
    }
    let scalar = per.iter().copied().sum::<T>() * inv_b;
    let per_sample = Tensor::new(&[b], per)?;
    per_sample.ensure_finite(op)?;
    Ok((LossValue { scalar, per_sample }, Tensor::new(&[b, j], grad)?))
}

/// Log-sum-exp margin loss on head goodness, with `dL/dG`.
pub fn loss_sff<T: Real>(g: &GoodnessMatrix<T>, labels: &[usize]) -> Result<(LossValue<T>, Tensor<T>)> {
    softmax_margin(&g.values, labels, "loss_sff")
}

/// Softmax competitive loss on channel-group goodness, with `dL/dG`.
pub fn loss_cwc<T: Real>(g: &GoodnessMatrix<T>, labels: &[usize]) -> Result<(LossValue<T>, Tensor<T>)> {
    softmax_margin(&g.values, labels, "loss_cwc")
}

/// Mean softmax cross-entropy on logits, with `dL/dlogits`.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(LossValue<T>, Tensor<T>)> {
    softmax_margin(logits, labels, "cross_entropy")
}
