//! Mean estimation over the collector's pooled data: unbiased averaging (UA),
//! per-user Bayesian posteriors, and user-level inverse-variance weighting (UWA).

use rayon::prelude::*;

use crate::discretization::{BucketGrid, Likelihood};
use crate::error::{Error, Result};
use crate::mechanisms::{Mechanism, PerturbedValue};
use crate::scalar::{compensated_sum, Real};

/// Every value one user released, at most one per service.
#[derive(Clone, Debug, PartialEq)]
pub struct UserObservations<T> {
    pub user: usize,
    pub values: Vec<PerturbedValue<T>>,
}

impl<T: Real> UserObservations<T> {
    pub fn new(user: usize, values: Vec<PerturbedValue<T>>) -> Result<Self> {
        for (i, a) in values.iter().enumerate() {
            if values[..i].iter().any(|b| b.service == a.service) {
                return Err(Error::Data(format!(
                    "user {user} reported twice to service {}",
                    a.service
                )));
            }
        }
        Ok(Self { user, values })
    }

    /// The same user seen only through `services`; `None` when nothing is left.
    pub fn restrict(&self, services: &[usize]) -> Option<Self> {
        let values: Vec<_> =
            self.values.iter().copied().filter(|v| services.contains(&v.service)).collect();
        (!values.is_empty()).then(|| Self { user: self.user, values })
    }

    pub fn services(&self) -> Vec<usize> {
        self.values.iter().map(|v| v.service).collect()
    }
}

fn mechanism_for<T: Real>(mechanisms: &[Mechanism<T>], service: usize) -> Result<&Mechanism<T>> {
    mechanisms
        .get(service)
        .ok_or_else(|| Error::Config(format!("no mechanism registered for service {service}")))
}

/// Unbiased averaging. Each value is unbiased into the canonical domain,
/// averaged within its user, then averaged across users. Under full
/// participation this is the grand mean over all `n·m` values.
pub fn unbiased_average<T: Real>(
    observations: &[UserObservations<T>],
    mechanisms: &[Mechanism<T>],
) -> Result<T> {
    let per_user: Vec<T> = observations
        .par_iter()
        .filter(|u| !u.values.is_empty())
        .map(|u| {
            let mut acc = T::zero();
            for pv in &u.values {
                acc += mechanism_for(mechanisms, pv.service)?.unbias_canonical(pv.value);
            }
            Ok(acc / T::from_count(u.values.len()))
        })
        .collect::<Result<_>>()?;
    if per_user.is_empty() {
        return Err(Error::Empty);
    }
    let n = T::from_count(per_user.len());
    Ok(compensated_sum(per_user) / n)
}

/// Mean estimate of one service alone: the average of its unbiased values.
pub fn single_service_mean<T: Real>(
    observations: &[UserObservations<T>],
    mechanism: &Mechanism<T>,
    service: usize,
) -> Result<T> {
    let vals: Vec<T> = observations
        .iter()
        .flat_map(|u| u.values.iter())
        .filter(|pv| pv.service == service)
        .map(|pv| mechanism.unbias_canonical(pv.value))
        .collect();
    if vals.is_empty() {
        return Err(Error::Empty);
    }
    let n = T::from_count(vals.len());
    Ok(compensated_sum(vals) / n)
}

/// Discretised posterior over the canonical input midpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior<T> {
    grid: BucketGrid<T>,
    probs: Vec<T>,
    resets: usize,
}

impl<T: Real> Posterior<T> {
    pub fn uniform(grid: BucketGrid<T>) -> Self {
        let u = T::one() / T::from_count(grid.count());
        Self { grid, probs: vec![u; grid.count()], resets: 0 }
    }

    /// Point mass on bucket `k`.
    pub fn point_mass(grid: BucketGrid<T>, k: usize) -> Self {
        let mut probs = vec![T::zero(); grid.count()];
        probs[k] = T::one();
        Self { grid, probs, resets: 0 }
    }

    pub fn grid(&self) -> &BucketGrid<T> {
        &self.grid
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    /// Number of times an update underflowed and the posterior was reset.
    pub fn resets(&self) -> usize {
        self.resets
    }

    pub fn mode(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = k;
            }
        }
        best
    }

    fn reset(&mut self, user: usize) {
        log::warn!("posterior of user {user} underflowed; reset to uniform");
        let u = T::one() / T::from_count(self.probs.len());
        self.probs.iter_mut().for_each(|p| *p = u);
        self.resets += 1;
    }
}

/// Above this many observations the update switches to log-space.
const LOG_SPACE_THRESHOLD: usize = 64;

fn check_grids<T: Real>(likelihoods: &[Likelihood<T>], grid: &BucketGrid<T>) -> Result<()> {
    for l in likelihoods {
        if let Likelihood::Matrix(m) = l {
            if m.input_grid() != grid {
                return Err(Error::Config(format!(
                    "service {} matrix was built over a different input grid",
                    m.service()
                )));
            }
        }
    }
    Ok(())
}

/// Bayesian updating from a uniform prior, one observation at a time.
/// `likelihoods[j]` serves observations from service `j`.
pub fn bayesian_update<T: Real>(
    observations: &UserObservations<T>,
    likelihoods: &[Likelihood<T>],
    grid: &BucketGrid<T>,
) -> Result<Posterior<T>> {
    check_grids(likelihoods, grid)?;
    update_unchecked(observations, likelihoods, grid)
}

fn update_unchecked<T: Real>(
    observations: &UserObservations<T>,
    likelihoods: &[Likelihood<T>],
    grid: &BucketGrid<T>,
) -> Result<Posterior<T>> {
    let h = grid.count();
    let mut post = Posterior::uniform(*grid);
    let mut row = vec![T::zero(); h];
    let log_space = observations.values.len() > LOG_SPACE_THRESHOLD;
    let mut logs = if log_space { vec![T::zero(); h] } else { Vec::new() };

    for pv in &observations.values {
        let lik = likelihoods.get(pv.service).ok_or_else(|| {
            Error::Config(format!("no likelihood registered for service {}", pv.service))
        })?;
        lik.fill(pv.value, grid, &mut row).ok_or(Error::OutsideSupport {
            user: observations.user,
            service: pv.service,
            value: pv.value.to_f64_lossy(),
        })?;
        if log_space {
            logs.iter_mut().zip(&row).for_each(|(l, &r)| *l += r.ln());
            continue;
        }
        let mut total = T::zero();
        for (p, &r) in post.probs.iter_mut().zip(&row) {
            *p *= r;
            total += *p;
        }
        if total > T::zero() && total.is_finite() {
            post.probs.iter_mut().for_each(|p| *p /= total);
        } else {
            post.reset(observations.user);
        }
    }

    if log_space {
        let max = logs.iter().copied().fold(T::neg_infinity(), T::max);
        if max.is_finite() {
            post.probs = logs.iter().map(|&l| (l - max).exp()).collect();
            let total: T = post.probs.iter().copied().sum();
            post.probs.iter_mut().for_each(|p| *p /= total);
        } else {
            post.reset(observations.user);
        }
    }
    Ok(post)
}

/// Expected variance of a service's unbiased (canonical) estimate under the
/// posterior: `Σ_k f^k · var(μ_k)`.
pub fn posterior_variance<T: Real>(posterior: &Posterior<T>, mech: &Mechanism<T>) -> T {
    posterior
        .probs
        .iter()
        .zip(posterior.grid.midpoints())
        .map(|(&f, mu)| f * mech.unbiased_variance_canonical(mu))
        .sum()
}

/// Minimum-variance weights for independent unbiased estimates with the
/// given variances, and the variance they achieve.
pub fn inverse_variance_weights<T: Real>(variances: &[T]) -> Result<(Vec<T>, T)> {
    if variances.is_empty() {
        return Err(Error::Empty);
    }
    if let Some(v) = variances.iter().find(|&&v| !(v > T::zero() && v.is_finite())) {
        return Err(Error::Internal(format!("non-positive variance {v}")));
    }
    let precision: T = variances.iter().map(|&v| v.recip()).sum();
    let weights = variances.iter().map(|&v| (v * precision).recip()).collect();
    Ok((weights, precision.recip()))
}

/// Result of [`uwa`].
#[derive(Clone, Debug, PartialEq)]
pub struct UwaEstimate<T> {
    pub mean: T,
    /// Achieved variance `[Σ_t 1/V_t]^{-1}` of each user's combined value.
    pub user_variances: Vec<T>,
    /// Users whose posterior had to be reset.
    pub degenerate_users: usize,
}

/// User-level weighted averaging. `mechanisms[j]` and `likelihoods[j]`
/// describe service `j`.
pub fn uwa<T: Real>(
    observations: &[UserObservations<T>],
    mechanisms: &[Mechanism<T>],
    likelihoods: &[Likelihood<T>],
    grid: &BucketGrid<T>,
) -> Result<UwaEstimate<T>> {
    if observations.is_empty() {
        return Err(Error::Empty);
    }
    check_grids(likelihoods, grid)?;
    let mids = grid.midpoints();
    let var_tables: Vec<Vec<T>> = mechanisms
        .iter()
        .map(|m| mids.iter().map(|&mu| m.unbiased_variance_canonical(mu)).collect())
        .collect();

    let per_user: Vec<(T, T, bool)> = observations
        .par_iter()
        .map(|u| {
            if u.values.is_empty() {
                return Err(Error::Data(format!("user {} has no observations", u.user)));
            }
            let post = update_unchecked(u, likelihoods, grid)?;
            let mut vars = Vec::with_capacity(u.values.len());
            for pv in &u.values {
                let table = var_tables.get(pv.service).ok_or_else(|| {
                    Error::Config(format!("no mechanism registered for service {}", pv.service))
                })?;
                vars.push(post.probs.iter().zip(table).map(|(&f, &v)| f * v).sum::<T>());
            }
            let (weights, achieved) = inverse_variance_weights(&vars)?;
            let mut combined = T::zero();
            for (w, pv) in weights.iter().zip(&u.values) {
                combined += *w * mechanisms[pv.service].unbias_canonical(pv.value);
            }
            Ok((combined, achieved, post.resets > 0))
        })
        .collect::<Result<_>>()?;

    let n = T::from_count(per_user.len());
    Ok(UwaEstimate {
        mean: compensated_sum(per_user.iter().map(|t| t.0)) / n,
        user_variances: per_user.iter().map(|t| t.1).collect(),
        degenerate_users: per_user.iter().filter(|t| t.2).count(),
    })
}
