//! Utility metrics: MSE over trials, KL and square-root JS divergence.
//! Logarithms are natural.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Floor applied to the reference distribution inside KL.
pub const KL_FLOOR: f64 = 1e-12;

/// Per-trial estimates of one quantity with a known true value.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialSeries<T> {
    pub estimates: Vec<T>,
    pub truth: T,
}

impl<T: Real> TrialSeries<T> {
    pub fn new(estimates: Vec<T>, truth: T) -> Result<Self> {
        if estimates.is_empty() {
            return Err(Error::Empty);
        }
        Ok(Self { estimates, truth })
    }

    pub fn mse(&self) -> T {
        mse(self)
    }
}

pub fn mse<T: Real>(series: &TrialSeries<T>) -> T {
    let n = T::from_count(series.estimates.len());
    series.estimates.iter().map(|&e| (e - series.truth).powi(2)).sum::<T>() / n
}

/// `Σ P(i) ln(P(i) / max(Q(i), 1e-12))`, with `0 · ln(0/q) = 0`.
pub fn kl_divergence<T: Real>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch(p.len(), q.len()));
    }
    let floor = T::lit(KL_FLOOR);
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > T::zero())
        .map(|(&pi, &qi)| pi * (pi / qi.max(floor)).ln())
        .sum::<T>()
        .max(T::zero()))
}

/// `sqrt(KL(P‖M)/2 + KL(Q‖M)/2)` with `M = (P + Q)/2`; lies in `[0, sqrt(ln 2)]`.
pub fn js_divergence<T: Real>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch(p.len(), q.len()));
    }
    let half = T::lit(0.5);
    let m: Vec<T> = p.iter().zip(q).map(|(&a, &b)| half * (a + b)).collect();
    let js = half * kl_divergence(p, &m)? + half * kl_divergence(q, &m)?;
    Ok(js.max(T::zero()).sqrt())
}
