//! User-level likelihood estimation (ULE): users are grouped by the joint
//! vector of output buckets their values fall into, and EM recovers the
//! maximum-likelihood input histogram from those counts.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discretization::{BucketGrid, ConditionalMatrix};
use crate::error::{Error, Result};
use crate::mean::UserObservations;
use crate::scalar::{compensated_sum, Real};

/// Output-bucket index per participating service, in stratum service order.
pub type BucketVector = Vec<u32>;

/// Users that reported to the same set of services, grouped by bucket vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stratum {
    /// Service ids in ascending order.
    pub services: Vec<usize>,
    pub groups: Vec<(BucketVector, u64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroupedCounts {
    pub strata: Vec<Stratum>,
}

impl GroupedCounts {
    pub fn total(&self) -> u64 {
        self.strata.iter().flat_map(|s| s.groups.iter()).map(|g| g.1).sum()
    }

    pub fn distinct(&self) -> usize {
        self.strata.iter().map(|s| s.groups.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }
}

fn matrix_index<T: Real>(matrices: &[ConditionalMatrix<T>]) -> BTreeMap<usize, usize> {
    matrices.iter().enumerate().map(|(i, m)| (m.service(), i)).collect()
}

fn bucket_vector<T: Real>(
    user: &UserObservations<T>,
    matrices: &[ConditionalMatrix<T>],
    index: &BTreeMap<usize, usize>,
) -> Result<(Vec<usize>, BucketVector)> {
    let mut vals = user.values.clone();
    vals.sort_by_key(|v| v.service);
    let mut services = Vec::with_capacity(vals.len());
    let mut buckets = Vec::with_capacity(vals.len());
    for pv in vals {
        let m = index.get(&pv.service).map(|&i| &matrices[i]).ok_or_else(|| {
            Error::Config(format!("no conditional matrix for service {}", pv.service))
        })?;
        let r = m.output_grid().locate(pv.value).ok_or(Error::OutsideSupport {
            user: user.user,
            service: pv.service,
            value: pv.value.to_f64_lossy(),
        })?;
        services.push(pv.service);
        buckets.push(r as u32);
    }
    Ok((services, buckets))
}

/// Maps every user to its bucket vector and counts multiplicities. Users
/// with different service subsets land in different strata.
pub fn group_users<T: Real>(
    observations: &[UserObservations<T>],
    matrices: &[ConditionalMatrix<T>],
) -> Result<GroupedCounts> {
    let index = matrix_index(matrices);
    let mut strata: BTreeMap<Vec<usize>, BTreeMap<BucketVector, u64>> = BTreeMap::new();
    for user in observations.iter().filter(|u| !u.values.is_empty()) {
        let (services, buckets) = bucket_vector(user, matrices, &index)?;
        *strata.entry(services).or_default().entry(buckets).or_default() += 1;
    }
    Ok(GroupedCounts {
        strata: strata
            .into_iter()
            .map(|(services, g)| Stratum { services, groups: g.into_iter().collect() })
            .collect(),
    })
}

/// One group per user, without merging identical bucket vectors.
pub fn ungrouped<T: Real>(
    observations: &[UserObservations<T>],
    matrices: &[ConditionalMatrix<T>],
) -> Result<GroupedCounts> {
    let index = matrix_index(matrices);
    let mut strata: BTreeMap<Vec<usize>, Vec<(BucketVector, u64)>> = BTreeMap::new();
    for user in observations.iter().filter(|u| !u.values.is_empty()) {
        let (services, buckets) = bucket_vector(user, matrices, &index)?;
        strata.entry(services).or_default().push((buckets, 1));
    }
    Ok(GroupedCounts {
        strata: strata.into_iter().map(|(services, groups)| Stratum { services, groups }).collect(),
    })
}

/// A histogram over canonical input buckets.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramEstimate<T> {
    pub grid: BucketGrid<T>,
    pub probs: Vec<T>,
}

impl<T: Real> HistogramEstimate<T> {
    pub fn new(grid: BucketGrid<T>, probs: Vec<T>) -> Result<Self> {
        if probs.len() != grid.count() {
            return Err(Error::LengthMismatch(probs.len(), grid.count()));
        }
        let s: T = probs.iter().copied().sum();
        if (s - T::one()).abs() > T::rounding_tolerance() || probs.iter().any(|&p| p < T::zero()) {
            return Err(Error::Data(format!("histogram is not on the simplex (sum {s})")));
        }
        Ok(Self { grid, probs })
    }

    /// Histogram of raw canonical values.
    pub fn from_values(grid: BucketGrid<T>, values: &[T]) -> Self {
        Self { probs: grid.histogram(values), grid }
    }

    pub fn mean(&self) -> T {
        histogram_mean(self)
    }
}

/// `Σ_t d_t · μ_t`.
pub fn histogram_mean<T: Real>(estimate: &HistogramEstimate<T>) -> T {
    estimate.probs.iter().zip(estimate.grid.midpoints()).map(|(&d, mu)| d * mu).sum()
}

/// EM stopping rule and positivity floor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    /// Stop once `|L(t+1) - L(t)|` drops below this.
    pub threshold: f64,
    pub max_iterations: usize,
    /// Lower bound applied to each `d_t` after the M-step.
    pub floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { threshold: 1e-4, max_iterations: 10_000, floor: 1e-12 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmResult<T> {
    pub estimate: HistogramEstimate<T>,
    /// Log-likelihood of every iterate, starting from the uniform one.
    pub trace: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

impl<T: Real> EmResult<T> {
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iteration", "log_likelihood"])?;
        for (i, l) in self.trace.iter().enumerate() {
            out.write_record([i.to_string(), l.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_histogram_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["midpoint", "probability"])?;
        for (mu, d) in self.estimate.grid.midpoints().iter().zip(&self.estimate.probs) {
            out.write_record([mu.to_string(), d.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Joint likelihood of every group over the input buckets, each row scaled
/// by `exp(-log_scale)` so products of many small factors stay representable.
struct Kernel<T> {
    cols: usize,
    g: Vec<T>,
    counts: Vec<T>,
    log_scale: Vec<T>,
}

const DIRECT_PRODUCT_MAX_SERVICES: usize = 8;
const GROUP_CHUNK: usize = 256;

fn build_kernel<T: Real>(
    counts: &GroupedCounts,
    matrices: &[ConditionalMatrix<T>],
    cols: usize,
) -> Result<Kernel<T>> {
    let index = matrix_index(matrices);
    let tiny = T::lit(1e-12);
    let mut g = Vec::new();
    let mut ns = Vec::new();
    let mut scales = Vec::new();
    for stratum in &counts.strata {
        let mats: Vec<&ConditionalMatrix<T>> = stratum
            .services
            .iter()
            .map(|s| {
                index.get(s).map(|&i| &matrices[i]).ok_or_else(|| {
                    Error::Config(format!("no conditional matrix for service {s}"))
                })
            })
            .collect::<Result<_>>()?;
        let log_space = mats.len() > DIRECT_PRODUCT_MAX_SERVICES
            || mats.iter().any(|m| m.min_entry() < tiny);
        let start = g.len();
        g.resize(start + stratum.groups.len() * cols, T::zero());
        let mut stratum_scales = vec![T::zero(); stratum.groups.len()];
        g[start..]
            .par_chunks_mut(cols)
            .zip(stratum_scales.par_iter_mut())
            .zip(stratum.groups.par_iter())
            .for_each(|((row, scale), (buckets, _))| {
                if log_space {
                    row.iter_mut().for_each(|x| *x = T::zero());
                    for (m, &r) in mats.iter().zip(buckets) {
                        for (x, &p) in row.iter_mut().zip(m.row(r as usize)) {
                            *x += p.ln();
                        }
                    }
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    if max.is_finite() {
                        row.iter_mut().for_each(|x| *x = (*x - max).exp());
                        *scale = max;
                    } else {
                        row.iter_mut().for_each(|x| *x = T::zero());
                    }
                } else {
                    row.iter_mut().for_each(|x| *x = T::one());
                    for (m, &r) in mats.iter().zip(buckets) {
                        for (x, &p) in row.iter_mut().zip(m.row(r as usize)) {
                            *x *= p;
                        }
                    }
                }
            });
        for (k, row) in g[start..].chunks(cols).enumerate() {
            if !row.iter().any(|&x| x > T::zero()) {
                return Err(Error::ImpossibleObservation { group: k });
            }
        }
        scales.extend(stratum_scales);
        ns.extend(stratum.groups.iter().map(|(_, n)| T::lit(*n as f64)));
    }
    Ok(Kernel { cols, g, counts: ns, log_scale: scales })
}

impl<T: Real> Kernel<T> {
    fn groups(&self) -> usize {
        self.counts.len()
    }

    /// `Σ_t d_t g_k(t)` for every group.
    fn denominators(&self, d: &[T]) -> Vec<T> {
        self.g
            .par_chunks(self.cols)
            .map(|row| row.iter().zip(d).map(|(&g, &d)| g * d).sum())
            .collect()
    }

    fn log_likelihood(&self, denoms: &[T]) -> T {
        compensated_sum(
            denoms
                .iter()
                .zip(&self.counts)
                .zip(&self.log_scale)
                .map(|((&den, &n), &s)| n * (den.ln() + s)),
        )
    }

    /// Unnormalised E-step `P_t = d_t Σ_k n_k g_k(t) / denom_k`, reduced over
    /// fixed-size group chunks in a fixed order.
    fn e_step(&self, d: &[T], denoms: &[T]) -> Vec<T> {
        let cols = self.cols;
        let partials: Vec<Vec<T>> = self
            .g
            .par_chunks(GROUP_CHUNK * cols)
            .enumerate()
            .map(|(c, block)| {
                let mut acc = vec![T::zero(); cols];
                for (i, row) in block.chunks(cols).enumerate() {
                    let k = c * GROUP_CHUNK + i;
                    let r = self.counts[k] / denoms[k];
                    for (a, &g) in acc.iter_mut().zip(row) {
                        *a += r * g;
                    }
                }
                acc
            })
            .collect();
        let mut p = vec![T::zero(); cols];
        for part in partials {
            for (a, b) in p.iter_mut().zip(part) {
                *a += b;
            }
        }
        p.iter_mut().zip(d).for_each(|(p, &d)| *p *= d);
        p
    }
}

/// Runs EM from the uniform histogram until the log-likelihood settles.
/// Every matrix must share the same canonical input grid.
pub fn em_estimate<T: Real>(
    counts: &GroupedCounts,
    matrices: &[ConditionalMatrix<T>],
    config: &EmConfig,
) -> Result<EmResult<T>> {
    let first = matrices.first().ok_or_else(|| Error::Config("EM needs at least one matrix".into()))?;
    let grid = *first.input_grid();
    if let Some(m) = matrices.iter().find(|m| m.input_grid() != &grid) {
        return Err(Error::Config(format!(
            "service {} matrix uses a different input grid",
            m.service()
        )));
    }
    if counts.is_empty() {
        return Err(Error::Empty);
    }
    let l = grid.count();
    let kernel = build_kernel(counts, matrices, l)?;
    debug_assert_eq!(kernel.g.len(), kernel.groups() * l);

    let floor = T::lit(config.floor);
    let threshold = T::lit(config.threshold);
    let tol = T::rounding_tolerance();
    let mut d = vec![T::one() / T::from_count(l); l];
    let mut trace: Vec<T> = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    loop {
        let denoms = kernel.denominators(&d);
        let ll = kernel.log_likelihood(&denoms);
        if let Some(&prev) = trace.last() {
            if ll < prev - tol * prev.abs().max(T::one()) {
                return Err(Error::Internal(format!(
                    "EM log-likelihood decreased from {prev} to {ll} at iteration {iterations}"
                )));
            }
            if (ll - prev).abs() < threshold {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        if iterations >= config.max_iterations {
            break;
        }
        let p = kernel.e_step(&d, &denoms);
        let total: T = p.iter().copied().sum();
        d = p.into_iter().map(|x| x / total).collect();
        if d.iter().any(|&x| x < floor) {
            d.iter_mut().for_each(|x| *x = x.max(floor));
            let s: T = d.iter().copied().sum();
            d.iter_mut().for_each(|x| *x /= s);
        }
        iterations += 1;
    }

    Ok(EmResult { estimate: HistogramEstimate { grid, probs: d }, trace, iterations, converged })
}
