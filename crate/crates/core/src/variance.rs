//! Trace-of-covariance diagnostics for importance-sampled gradient estimators.
//!
//! For weights `ω̃` over `N` examples with gradient norms `‖g_n‖`, the single-draw
//! estimator `(ω̄/ω̃_n)·g_n` has
//! `Tr Σ = mean(ω̃) · mean(‖g_n‖²/ω̃_n) − ‖g_true‖²`.
//! The ideal proposal `ω̃ ∝ ‖g‖` attains the lower bound `mean(‖g‖)² − ‖g_true‖²`.

use std::collections::HashMap;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VarianceError {
    #[error("length mismatch: {weights} weights for {norms} norms")]
    LengthMismatch { weights: usize, norms: usize },
    #[error("example {index} has zero weight but a nonzero gradient")]
    ZeroWeight { index: usize },
    #[error("no values to average")]
    Empty,
}

fn mean<T: Scalar>(v: impl Iterator<Item = T>) -> T {
    let mut n = 0usize;
    let mut s = T::zero();
    for x in v {
        s += x;
        n += 1;
    }
    if n == 0 {
        T::nan()
    } else {
        s / T::of_usize(n)
    }
}

/// Trace of the estimator covariance for an arbitrary weighting.
pub fn tr_sigma_general<T: Scalar>(weights: &[T], grad_sq_norms: &[T], gtrue_sq: T) -> Result<T, VarianceError> {
    if weights.len() != grad_sq_norms.len() {
        return Err(VarianceError::LengthMismatch { weights: weights.len(), norms: grad_sq_norms.len() });
    }
    if weights.is_empty() {
        return Err(VarianceError::Empty);
    }
    let mut ratio_sum = T::zero();
    for (index, (&w, &g2)) in weights.iter().zip(grad_sq_norms).enumerate() {
        if g2 == T::zero() {
            continue;
        }
        if !(w > T::zero()) {
            return Err(VarianceError::ZeroWeight { index });
        }
        ratio_sum += g2 / w;
    }
    let n = T::of_usize(weights.len());
    Ok(mean(weights.iter().copied()) * (ratio_sum / n) - gtrue_sq)
}

/// Optimal trace, reached when weights equal the gradient norms.
/// NaN for an empty input.
pub fn tr_sigma_ideal<T: Scalar>(grad_norms: &[T], gtrue_sq: T) -> T {
    let m = mean(grad_norms.iter().copied());
    m * m - gtrue_sq
}

/// Trace under uniform sampling. NaN for an empty input.
pub fn tr_sigma_unif<T: Scalar>(grad_sq_norms: &[T], gtrue_sq: T) -> T {
    mean(grad_sq_norms.iter().copied()) - gtrue_sq
}

/// Trace when sampling with outdated weights `old` while the true norms are
/// now `sqrt(fresh_sq_norms)`.
pub fn tr_sigma_stale<T: Scalar>(old_weights: &[T], fresh_sq_norms: &[T], gtrue_sq: T) -> Result<T, VarianceError> {
    tr_sigma_general(old_weights, fresh_sq_norms, gtrue_sq)
}

/// Aligns `(index, value)` lists on the indices present in both, ascending.
pub fn intersect<T: Scalar>(old: &[(usize, T)], fresh: &[(usize, T)]) -> (Vec<usize>, Vec<T>, Vec<T>) {
    let lookup: HashMap<usize, T> = old.iter().copied().collect();
    let mut pairs: Vec<(usize, T, T)> =
        fresh.iter().filter_map(|&(i, f)| lookup.get(&i).map(|&o| (i, o, f))).collect();
    pairs.sort_by_key(|p| p.0);
    let idx = pairs.iter().map(|p| p.0).collect();
    let o = pairs.iter().map(|p| p.1).collect();
    let f = pairs.iter().map(|p| p.2).collect();
    (idx, o, f)
}

/// Upper bound on `‖g_true‖²`: the squared mean of per-chunk gradient norms.
pub fn estimate_gtrue_sq<T: Scalar>(minibatch_grad_norms: &[T]) -> Result<T, VarianceError> {
    if minibatch_grad_norms.is_empty() {
        return Err(VarianceError::Empty);
    }
    let m = mean(minibatch_grad_norms.iter().copied());
    Ok(m * m)
}

/// `sqrt(max(v, 0))`, for plotting on the gradient's scale.
pub fn sqrt_clamped<T: Scalar>(v: T) -> T {
    v.max(T::zero()).sqrt()
}

/// The three traces at one training step, sharing one `‖g_true‖²` estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceReport<T> {
    pub step: u64,
    pub tr_ideal: T,
    /// Absent when no importance proposal was in use.
    pub tr_stale: Option<T>,
    pub tr_unif: T,
    pub gtrue_sq_estimate: T,
}

impl<T: Scalar> VarianceReport<T> {
    /// `fresh_norms` are current gradient norms (not squared); `old_weights`,
    /// if given, are the weights the sampler actually used, aligned with them.
    pub fn compute(
        step: u64,
        fresh_norms: &[T],
        old_weights: Option<&[T]>,
        gtrue_sq_estimate: T,
    ) -> Result<Self, VarianceError> {
        if fresh_norms.is_empty() {
            return Err(VarianceError::Empty);
        }
        let sq: Vec<T> = fresh_norms.iter().map(|&v| v * v).collect();
        let tr_stale = old_weights.map(|w| tr_sigma_stale(w, &sq, gtrue_sq_estimate)).transpose()?;
        Ok(Self {
            step,
            tr_ideal: tr_sigma_ideal(fresh_norms, gtrue_sq_estimate),
            tr_stale,
            tr_unif: tr_sigma_unif(&sq, gtrue_sq_estimate),
            gtrue_sq_estimate,
        })
    }

    pub fn sqrt_ideal(&self) -> T {
        sqrt_clamped(self.tr_ideal)
    }

    pub fn sqrt_stale(&self) -> Option<T> {
        self.tr_stale.map(sqrt_clamped)
    }

    pub fn sqrt_unif(&self) -> T {
        sqrt_clamped(self.tr_unif)
    }
}
