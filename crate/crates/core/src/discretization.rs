//! Bucket grids and the conditional probability matrices
//! `P[output bucket | input bucket]` consumed by Bayesian updating and EM.
//!
//! Input grids always live in the canonical domain `[-1, 1]`; each matrix
//! maps its input midpoints into the mechanism's native domain before
//! integrating the output density.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanisms::{Mechanism, MechanismKind};
use crate::scalar::Real;

/// Uniform partition of `[lo, hi]` into `count` buckets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BucketGrid<T> {
    lo: T,
    hi: T,
    count: usize,
}

impl<T: Real> BucketGrid<T> {
    pub fn new(lo: T, hi: T, count: usize) -> Result<Self> {
        if count < 2 {
            return Err(Error::Config(format!("bucket count must be at least 2, got {count}")));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Config(format!("invalid grid range [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi, count })
    }

    /// `count` buckets over the canonical domain `[-1, 1]`.
    pub fn canonical(count: usize) -> Result<Self> {
        Self::new(-T::one(), T::one(), count)
    }

    pub fn lo(&self) -> T {
        self.lo
    }

    pub fn hi(&self) -> T {
        self.hi
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn width(&self) -> T {
        (self.hi - self.lo) / T::from_count(self.count)
    }

    pub fn edge(&self, k: usize) -> T {
        if k == self.count {
            self.hi
        } else {
            self.lo + T::from_count(k) * self.width()
        }
    }

    pub fn midpoint(&self, k: usize) -> T {
        self.lo + (T::from_count(k) + T::lit(0.5)) * self.width()
    }

    pub fn midpoints(&self) -> Vec<T> {
        (0..self.count).map(|k| self.midpoint(k)).collect()
    }

    /// Bucket containing `x`; `hi` belongs to the last bucket.
    pub fn locate(&self, x: T) -> Option<usize> {
        if !(x >= self.lo && x <= self.hi) {
            return None;
        }
        let k = ((x - self.lo) / self.width()).floor().to_usize().unwrap_or(0);
        Some(k.min(self.count - 1))
    }

    /// Index of the midpoint nearest to `x`, ties going to the lower index.
    /// Values outside the grid clamp to the end buckets.
    pub fn nearest_midpoint(&self, x: T) -> usize {
        let t = (x - self.lo) / self.width() - T::lit(0.5);
        if t <= T::zero() {
            return 0;
        }
        let f = t.floor();
        let k = if t - f > T::lit(0.5) { f + T::one() } else { f };
        k.to_usize().unwrap_or(self.count - 1).min(self.count - 1)
    }

    /// Normalised histogram of `values` over this grid. Values outside the
    /// grid are clamped to the end buckets.
    pub fn histogram(&self, values: &[T]) -> Vec<T> {
        let mut counts = vec![0usize; self.count];
        for &v in values {
            let k = self.locate(v).unwrap_or(if v < self.lo { 0 } else { self.count - 1 });
            counts[k] += 1;
        }
        let n = T::from_count(values.len().max(1));
        counts.into_iter().map(|c| T::from_count(c) / n).collect()
    }
}

/// Discretised output domain of one mechanism.
#[derive(Clone, Debug, PartialEq)]
pub enum OutputGrid<T> {
    /// SR: one bucket per atom, positive atom first.
    Atoms([T; 2]),
    Uniform(BucketGrid<T>),
}

impl<T: Real> OutputGrid<T> {
    pub fn len(&self) -> usize {
        match self {
            Self::Atoms(_) => 2,
            Self::Uniform(g) => g.count(),
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Output bucket holding `x`. Values within a relative `1e-9` of an atom
    /// or of the grid's end points are snapped in.
    pub fn locate(&self, x: T) -> Option<usize> {
        let tol = T::rounding_tolerance();
        match self {
            Self::Atoms(atoms) => atoms
                .iter()
                .position(|&a| (x - a).abs() <= tol * a.abs().max(T::one())),
            Self::Uniform(g) => {
                let slack = tol * g.width();
                if x < g.lo() && x >= g.lo() - slack {
                    Some(0)
                } else if x > g.hi() && x <= g.hi() + slack {
                    Some(g.count() - 1)
                } else {
                    g.locate(x)
                }
            }
        }
    }
}

/// Discretises a bounded mechanism's output domain.
pub fn build_output_grid<T: Real>(mech: &Mechanism<T>, resolution: usize) -> Result<OutputGrid<T>> {
    match mech.kind() {
        MechanismKind::Laplace => Err(Error::UnsupportedMechanism(
            "Laplace",
            "its output is unbounded; use the truncated-bucket likelihood instead",
        )),
        MechanismKind::Sr => {
            let a = mech.sr_atom().expect("SR atom");
            Ok(OutputGrid::Atoms([a, -a]))
        }
        MechanismKind::Pm => {
            let c = mech.pm_c().expect("PM C");
            Ok(OutputGrid::Uniform(BucketGrid::new(-c, c, resolution)?))
        }
        MechanismKind::Sw => {
            let (b, _, _) = mech.sw_params().expect("SW params");
            Ok(OutputGrid::Uniform(BucketGrid::new(-b, T::one() + b, resolution)?))
        }
    }
}

/// How output-bucket probabilities are obtained from the density.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BucketRule {
    /// Exact integral over the bucket (the densities are piecewise constant).
    #[default]
    Exact,
    /// `width · density(bucket midpoint)`, with each column renormalised.
    Midpoint,
}

/// `P[output bucket r | input bucket k]` for one service, stored row-major so
/// that a row is the likelihood vector of one observed output bucket.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalMatrix<T> {
    service: usize,
    input: BucketGrid<T>,
    output: OutputGrid<T>,
    probs: Vec<T>,
}

impl<T: Real> ConditionalMatrix<T> {
    /// Builds a matrix from explicit entries (`probs[r * cols + k]`),
    /// checking that every column is a probability vector.
    pub fn from_probs(
        service: usize,
        input: BucketGrid<T>,
        output: OutputGrid<T>,
        probs: Vec<T>,
    ) -> Result<Self> {
        let (rows, cols) = (output.len(), input.count());
        if probs.len() != rows * cols {
            return Err(Error::LengthMismatch(probs.len(), rows * cols));
        }
        if probs.iter().any(|&p| !(p >= T::zero())) {
            return Err(Error::Config("conditional probabilities must be non-negative".into()));
        }
        let m = Self { service, input, output, probs };
        for k in 0..cols {
            let s: T = m.column(k).into_iter().sum();
            if (s - T::one()).abs() > T::rounding_tolerance() {
                return Err(Error::Config(format!("column {k} sums to {s}, expected 1")));
            }
        }
        Ok(m)
    }

    pub fn service(&self) -> usize {
        self.service
    }

    pub fn input_grid(&self) -> &BucketGrid<T> {
        &self.input
    }

    pub fn output_grid(&self) -> &OutputGrid<T> {
        &self.output
    }

    pub fn rows(&self) -> usize {
        self.output.len()
    }

    pub fn cols(&self) -> usize {
        self.input.count()
    }

    pub fn get(&self, r: usize, k: usize) -> T {
        self.probs[r * self.cols() + k]
    }

    /// Likelihood of output bucket `r` across every input bucket.
    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.probs[r * c..(r + 1) * c]
    }

    pub fn column(&self, k: usize) -> Vec<T> {
        (0..self.rows()).map(|r| self.get(r, k)).collect()
    }

    pub fn min_entry(&self) -> T {
        self.probs.iter().copied().fold(T::infinity(), T::min)
    }
}

/// Builds the conditional matrix of `mech` over `input` (canonical grid).
pub fn conditional_matrix<T: Real>(
    mech: &Mechanism<T>,
    service: usize,
    input: BucketGrid<T>,
    output_resolution: usize,
    rule: BucketRule,
) -> Result<ConditionalMatrix<T>> {
    let output = build_output_grid(mech, output_resolution)?;
    let (rows, cols) = (output.len(), input.count());
    let mut probs = vec![T::zero(); rows * cols];
    for k in 0..cols {
        let v = mech.to_native(input.midpoint(k));
        match &output {
            OutputGrid::Atoms(_) => {
                let p = mech.sr_positive_probability(v).expect("SR");
                probs[k] = p;
                probs[cols + k] = T::one() - p;
            }
            OutputGrid::Uniform(g) => {
                let d = mech.step_density(v).expect("bounded mechanism");
                let mut column_sum = T::zero();
                for r in 0..rows {
                    let p = match rule {
                        BucketRule::Exact => d.mass(g.edge(r), g.edge(r + 1)),
                        BucketRule::Midpoint => g.width() * d.at(g.midpoint(r)),
                    };
                    probs[r * cols + k] = p;
                    column_sum += p;
                }
                if rule == BucketRule::Midpoint {
                    for r in 0..rows {
                        probs[r * cols + k] /= column_sum;
                    }
                }
            }
        }
    }
    Ok(ConditionalMatrix { service, input, output, probs })
}

/// Mass of `Laplace(mu, scale)` on `[a, b]`, evaluated without cancellation
/// in the tails.
pub fn laplace_interval_mass<T: Real>(scale: T, mu: T, a: T, b: T) -> T {
    let half = T::lit(0.5);
    if b <= a {
        T::zero()
    } else if a >= mu {
        half * ((-(a - mu) / scale).exp() - (-(b - mu) / scale).exp())
    } else if b <= mu {
        half * (((b - mu) / scale).exp() - ((a - mu) / scale).exp())
    } else {
        T::one() - half * (-(mu - a) / scale).exp() - half * (-(b - mu) / scale).exp()
    }
}

/// Truncation half-width `max(sqrt|observed|, floor)`.
pub fn laplace_truncation<T: Real>(observed: T, floor: T) -> T {
    observed.abs().sqrt().max(floor)
}

/// Normalised likelihood of a Laplace observation over the input midpoints,
/// using the output bucket `[A - τ, A + τ]`.
pub fn laplace_bucket_prob<T: Real>(
    mech: &Mechanism<T>,
    observed: T,
    input: &BucketGrid<T>,
    tau_floor: T,
) -> Result<Vec<T>> {
    let scale = mech.laplace_scale().ok_or(Error::UnsupportedMechanism(
        "non-Laplace mechanism",
        "the truncated-bucket likelihood is Laplace only",
    ))?;
    if !observed.is_finite() {
        return Err(Error::Data(format!("non-finite Laplace observation {observed}")));
    }
    let tau = laplace_truncation(observed, tau_floor);
    let mut probs: Vec<T> = (0..input.count())
        .map(|k| laplace_interval_mass(scale, input.midpoint(k), observed - tau, observed + tau))
        .collect();
    let total: T = probs.iter().copied().sum();
    if total > T::zero() {
        probs.iter_mut().for_each(|p| *p /= total);
    } else {
        let u = T::one() / T::from_count(probs.len());
        probs.iter_mut().for_each(|p| *p = u);
    }
    Ok(probs)
}

/// Per-service likelihood: a conditional matrix for bounded mechanisms, the
/// truncated-bucket scheme for Laplace.
#[derive(Clone, Debug)]
pub enum Likelihood<T> {
    Matrix(ConditionalMatrix<T>),
    Laplace { mechanism: Mechanism<T>, tau_floor: T },
}

impl<T: Real> Likelihood<T> {
    /// Builds the likelihood for `mech` using the default `τ` floor (the
    /// input-grid width) for Laplace.
    pub fn for_mechanism(
        mech: &Mechanism<T>,
        service: usize,
        input: BucketGrid<T>,
        output_resolution: usize,
        rule: BucketRule,
    ) -> Result<Self> {
        match mech.kind() {
            MechanismKind::Laplace => Ok(Self::Laplace { mechanism: *mech, tau_floor: input.width() }),
            _ => Ok(Self::Matrix(conditional_matrix(mech, service, input, output_resolution, rule)?)),
        }
    }

    /// Writes `P(observed | μ_k)` for every input midpoint into `out`.
    /// Returns `None` when a bounded mechanism's value is outside its support.
    pub fn fill(&self, observed: T, input: &BucketGrid<T>, out: &mut [T]) -> Option<()> {
        match self {
            Self::Matrix(m) => {
                let r = m.output_grid().locate(observed)?;
                out.copy_from_slice(m.row(r));
            }
            Self::Laplace { mechanism, tau_floor } => {
                let p = laplace_bucket_prob(mechanism, observed, input, *tau_floor).ok()?;
                out.copy_from_slice(&p);
            }
        }
        Some(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mech(kind: MechanismKind, eps: f64) -> Mechanism<f64> {
        Mechanism::new(kind, eps).unwrap()
    }

    #[test]
    fn grid_midpoints_and_location() {
        let g = BucketGrid::<f64>::canonical(4).unwrap();
        assert_eq!(g.midpoints(), vec![-0.75, -0.25, 0.25, 0.75]);
        assert_eq!(g.width(), 0.5);
        assert_eq!(g.locate(1.0), Some(3));
        assert_eq!(g.locate(-1.0), Some(0));
        assert_eq!(g.locate(1.5), None);
        assert!(BucketGrid::<f64>::canonical(1).is_err());
    }

    #[test]
    fn nearest_midpoint_ties_go_low() {
        let g = BucketGrid::<f64>::canonical(4).unwrap();
        assert_eq!(g.nearest_midpoint(0.0), 1);
        assert_eq!(g.nearest_midpoint(0.5), 2);
        assert_eq!(g.nearest_midpoint(0.51), 3);
        assert_eq!(g.nearest_midpoint(-1.0), 0);
        assert_eq!(g.nearest_midpoint(-0.5), 0);
        assert_eq!(g.nearest_midpoint(1.0), 3);
    }

    #[test]
    fn output_grids() {
        let sr = mech(MechanismKind::Sr, 1.0);
        let g = build_output_grid(&sr, 99).unwrap();
        let a = sr.sr_atom().unwrap();
        assert_eq!(g, OutputGrid::Atoms([a, -a]));
        assert_eq!(g.locate(a * (1.0 + 1e-12)), Some(0));
        assert_eq!(g.locate(-a), Some(1));
        assert_eq!(g.locate(0.0), None);

        let pm = mech(MechanismKind::Pm, 1.0);
        let c = pm.pm_c().unwrap();
        match build_output_grid(&pm, 32).unwrap() {
            OutputGrid::Uniform(g) => {
                assert_eq!(g.count(), 32);
                assert!((g.lo() + c).abs() < 1e-15 && (g.hi() - c).abs() < 1e-15);
                assert!((g.width() - 2.0 * c / 32.0).abs() < 1e-15);
            }
            _ => panic!("expected uniform"),
        }

        let sw = mech(MechanismKind::Sw, 1.0);
        let (b, _, _) = sw.sw_params().unwrap();
        match build_output_grid(&sw, 16).unwrap() {
            OutputGrid::Uniform(g) => {
                assert!((g.width() - (1.0 + 2.0 * b) / 16.0).abs() < 1e-15);
            }
            _ => panic!("expected uniform"),
        }

        let lap = mech(MechanismKind::Laplace, 1.0);
        assert!(matches!(build_output_grid(&lap, 8), Err(Error::UnsupportedMechanism(..))));
    }

    #[test]
    fn sr_column_symmetric_at_zero() {
        let sr = mech(MechanismKind::Sr, 1.0);
        // an odd grid puts a midpoint exactly at 0
        let grid = BucketGrid::canonical(3).unwrap();
        let m = conditional_matrix(&sr, 0, grid, 2, BucketRule::Exact).unwrap();
        assert_eq!(m.column(1), vec![0.5, 0.5]);
    }

    #[test]
    fn sw_window_bucket_dominates() {
        let sw = mech(MechanismKind::Sw, 1.0);
        let (b, _, _) = sw.sw_params().unwrap();
        let grid = BucketGrid::canonical(4).unwrap();
        let m = conditional_matrix(&sw, 0, grid, 8, BucketRule::Exact).unwrap();
        let out = match m.output_grid() {
            OutputGrid::Uniform(g) => *g,
            _ => unreachable!(),
        };
        for k in 0..4 {
            let u = sw.to_native(grid.midpoint(k));
            let own = out.locate(u).unwrap();
            for r in 0..8 {
                let (a, z) = (out.edge(r), out.edge(r + 1));
                if z < u - b || a > u + b {
                    assert!(m.get(own, k) > m.get(r, k));
                }
            }
        }
    }

    #[test]
    fn midpoint_rule_columns_normalised() {
        let pm = mech(MechanismKind::Pm, 0.8);
        let grid = BucketGrid::canonical(16).unwrap();
        let m = conditional_matrix(&pm, 0, grid, 32, BucketRule::Midpoint).unwrap();
        for k in 0..16 {
            let s: f64 = m.column(k).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn laplace_mass_at_mode() {
        // A = 0.25, τ = 0.5 centred on μ = 0.25: mass = 1 - exp(-ετ/2)
        let eps = 1.3;
        let lap = mech(MechanismKind::Laplace, eps);
        assert_eq!(laplace_truncation(0.25, 0.0), 0.5);
        let m = laplace_interval_mass(lap.laplace_scale().unwrap(), 0.25, -0.25, 0.75);
        assert!((m - (1.0 - (-eps * 0.5 / 2.0_f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn laplace_mass_matches_cdf_difference() {
        let cdf = |x: f64, mu: f64, s: f64| {
            if x < mu {
                0.5 * ((x - mu) / s).exp()
            } else {
                1.0 - 0.5 * (-(x - mu) / s).exp()
            }
        };
        for (mu, a, b) in [(0.0, -0.3, 0.2), (0.5, 1.0, 2.0), (0.5, -3.0, -1.0), (-0.9, -0.95, 4.0)] {
            let direct = cdf(b, mu, 4.0) - cdf(a, mu, 4.0);
            assert!((laplace_interval_mass(4.0, mu, a, b) - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn laplace_vector_symmetric_and_normalised() {
        let lap = mech(MechanismKind::Laplace, 1.0);
        let grid = BucketGrid::canonical(8).unwrap();
        let p = laplace_bucket_prob(&lap, 0.0, &grid, grid.width()).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for k in 0..4 {
            assert!((p[k] - p[7 - k]).abs() < 1e-15);
        }
        // τ floor avoids a degenerate bucket at A = 0
        assert!(p.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn laplace_translation_invariance() {
        let lap = mech(MechanismKind::Laplace, 0.7);
        let g1 = BucketGrid::new(-1.0, 1.0, 8).unwrap();
        let g2 = BucketGrid::new(-0.5, 1.5, 8).unwrap();
        // same τ on both sides, so fix the floor above sqrt|A|
        let p1 = laplace_bucket_prob(&lap, 0.3, &g1, 2.0).unwrap();
        let p2 = laplace_bucket_prob(&lap, 0.8, &g2, 2.0).unwrap();
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn columns_are_stochastic(eps in 0.05f64..8.0, h in 2usize..40, res in 2usize..64, kind in 0usize..3) {
            let kind = [MechanismKind::Sr, MechanismKind::Pm, MechanismKind::Sw][kind];
            let m = conditional_matrix(&mech(kind, eps), 0, BucketGrid::canonical(h).unwrap(), res, BucketRule::Exact).unwrap();
            for k in 0..h {
                let col = m.column(k);
                prop_assert!(col.iter().all(|&p| p >= 0.0));
                prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn refinement_is_consistent(eps in 0.05f64..8.0, h in 2usize..20, res in 2usize..32, pm in any::<bool>()) {
            let kind = if pm { MechanismKind::Pm } else { MechanismKind::Sw };
            let mc = mech(kind, eps);
            let grid = BucketGrid::canonical(h).unwrap();
            let coarse = conditional_matrix(&mc, 0, grid, res, BucketRule::Exact).unwrap();
            let fine = conditional_matrix(&mc, 0, grid, 2 * res, BucketRule::Exact).unwrap();
            for r in 0..res {
                for k in 0..h {
                    let merged = fine.get(2 * r, k) + fine.get(2 * r + 1, k);
                    prop_assert!((merged - coarse.get(r, k)).abs() < 1e-12);
                }
            }
        }
    }
}
