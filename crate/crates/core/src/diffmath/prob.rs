//! Probability-simplex operations: softmax variants, Hellinger, cross-entropy,
//! entropy and KL-to-uniform, each with its analytic gradient.

use super::Tensor;
use crate::error::{bail, Result};
use crate::scalar::Scalar;
use num_traits::Float;

/// Floor applied to products under a square root when differentiating the
/// Hellinger affinity. The forward value is computed without it.
pub const HELLINGER_SQRT_FLOOR: f64 = 1e-12;

const SIMPLEX_TOL: f64 = 1e-6;

/// Numerically stable softmax of a vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = out.iter().copied().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// `ln softmax(logits)` computed through log-sum-exp.
pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

/// Softmax over the spatial positions of each of the `K` maps in a `[K, H, W]`
/// tensor.
pub fn spatial_softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.ndim() != 3 {
        bail!(Shape, "spatial_softmax expects [K,H,W], got {:?}", logits.shape());
    }
    logits.ensure_finite("attention logits")?;
    let mut out = logits.clone();
    for k in 0..logits.shape()[0] {
        let row = softmax(logits.row(k));
        out.row_mut(k).copy_from_slice(&row);
    }
    Ok(out)
}

/// Vector-Jacobian product of [`spatial_softmax`], given its output.
pub fn spatial_softmax_backward<T: Scalar>(out: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut grad = grad_out.clone();
    for k in 0..out.shape()[0] {
        let a = out.row(k);
        let g = grad_out.row(k);
        let dot: T = a.iter().zip(g).map(|(&x, &y)| x * y).sum();
        for ((gi, &ai), &go) in grad.row_mut(k).iter_mut().zip(a).zip(g) {
            *gi = ai * (go - dot);
        }
    }
    grad
}

fn check_simplex<T: Scalar>(p: &[T], what: &str) -> Result<()> {
    if p.is_empty() {
        bail!(InvalidInput, "{what} is empty");
    }
    if p.iter().any(|v| !v.is_finite() || *v < T::zero()) {
        bail!(InvalidInput, "{what} has negative or non-finite entries");
    }
    let sum: T = p.iter().copied().sum();
    if (sum.as_f64() - 1.0).abs() > SIMPLEX_TOL {
        bail!(InvalidInput, "{what} sums to {sum}, not 1");
    }
    Ok(())
}

/// Squared Hellinger distance `1 - sum_t sqrt(p_t q_t)` between two discrete
/// distributions.
pub fn hellinger_sq<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        bail!(Shape, "hellinger_sq length {} vs {}", p.len(), q.len());
    }
    check_simplex(p, "p")?;
    check_simplex(q, "q")?;
    Ok(hellinger_sq_unchecked(p, q))
}

pub(crate) fn hellinger_sq_unchecked<T: Scalar>(p: &[T], q: &[T]) -> T {
    let affinity: T = p.iter().zip(q).map(|(&a, &b)| (a * b).sqrt()).sum();
    T::one() - affinity
}

/// Gradient of [`hellinger_sq`] with respect to `p` (swap arguments for `q`).
pub fn hellinger_sq_grad<T: Scalar>(p: &[T], q: &[T]) -> Vec<T> {
    let floor = T::lit(HELLINGER_SQRT_FLOOR);
    let half = T::lit(0.5);
    p.iter()
        .zip(q)
        .map(|(&a, &b)| -half * b / (a * b).max(floor).sqrt())
        .collect()
}

/// `-ln softmax(logits)[label]`.
pub fn cross_entropy_from_logits<T: Scalar>(logits: &[T], label: usize) -> Result<T> {
    Ok(cross_entropy_with_grad(logits, label)?.0)
}

/// Cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_with_grad<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        bail!(Index, "label {label} outside {} logits", logits.len());
    }
    let logp = log_softmax(logits);
    let mut grad: Vec<T> = logp.iter().map(|&l| l.exp()).collect();
    grad[label] -= T::one();
    Ok((-logp[label], grad))
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy<T: Scalar>(p: &[T]) -> Result<T> {
    if p.iter().any(|v| *v < T::zero() || !Float::is_finite(*v)) {
        bail!(InvalidInput, "entropy of a vector with negative or non-finite entries");
    }
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked<T: Scalar>(p: &[T]) -> T {
    -p.iter()
        .filter(|v| **v > T::zero())
        .map(|&v| v * v.ln())
        .sum::<T>()
}

/// `KL(p || uniform_C) = ln C - H(p)`.
pub fn kl_to_uniform<T: Scalar>(p: &[T]) -> Result<T> {
    if p.is_empty() {
        bail!(InvalidInput, "kl_to_uniform over zero classes");
    }
    check_simplex(p, "p")?;
    let c = T::from_usize_lossy(p.len());
    Ok(p.iter()
        .filter(|v| **v > T::zero())
        .map(|&v| v * (v * c).ln())
        .sum())
}

/// `KL(softmax(logits) || uniform)` and its gradient with respect to the logits.
///
/// The gradient is `p_j (ln p_j + H(p))`.
pub fn kl_to_uniform_from_logits<T: Scalar>(logits: &[T]) -> Result<(T, Vec<T>)> {
    if logits.is_empty() {
        bail!(InvalidInput, "kl_to_uniform over zero classes");
    }
    let logp = log_softmax(logits);
    let p: Vec<T> = logp.iter().map(|&l| l.exp()).collect();
    let neg_entropy: T = p.iter().zip(&logp).map(|(&a, &l)| a * l).sum();
    let loss = neg_entropy + T::from_usize_lossy(logits.len()).ln();
    let grad = p.iter().zip(&logp).map(|(&a, &l)| a * (l - neg_entropy)).collect();
    Ok((loss, grad))
}
