//! User populations and simulated multi-service collection.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discretization::BucketGrid;
use crate::distribution::HistogramEstimate;
use crate::error::{Error, Result};
use crate::mean::UserObservations;
use crate::mechanisms::{Mechanism, MechanismKind, PerturbedValue};
use crate::scalar::{compensated_sum, Real};
use crate::seed;

/// True values in the canonical domain plus their ground-truth statistics.
#[derive(Clone, Debug)]
pub struct Population<T> {
    values: Vec<T>,
    true_mean: T,
    true_histogram: HistogramEstimate<T>,
}

impl<T: Real> Population<T> {
    /// `buckets` sets the resolution of the ground-truth histogram.
    pub fn new(values: Vec<T>, buckets: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty);
        }
        if let Some(v) = values.iter().find(|v| !(**v >= -T::one() && **v <= T::one())) {
            return Err(Error::Data(format!("population value {v} is outside [-1, 1]")));
        }
        let grid = BucketGrid::canonical(buckets)?;
        let true_mean = compensated_sum(values.iter().copied()) / T::from_count(values.len());
        let true_histogram = HistogramEstimate::from_values(grid, &values);
        Ok(Self { values, true_mean, true_histogram })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn true_mean(&self) -> T {
        self.true_mean
    }

    pub fn true_histogram(&self) -> &HistogramEstimate<T> {
        &self.true_histogram
    }

    /// Ground truth re-binned at another resolution.
    pub fn histogram(&self, buckets: usize) -> Result<HistogramEstimate<T>> {
        Ok(HistogramEstimate::from_values(BucketGrid::canonical(buckets)?, &self.values))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyntheticKind {
    /// Beta(2, 5) on `[0, 1]`.
    #[serde(rename = "beta25")]
    Beta25,
    /// Beta(2, 5) density times `1 + 0.5·sin(6πx)`.
    #[serde(rename = "beta_sin")]
    BetaSin,
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Beta25 => "beta25",
            Self::BetaSin => "beta_sin",
        })
    }
}

pub const BETA_ALPHA: f64 = 2.0;
pub const BETA_BETA: f64 = 5.0;
pub const SIN_AMPLITUDE: f64 = 0.5;
pub const SIN_FREQUENCY: f64 = 3.0;

fn sin_modulation(x: f64) -> f64 {
    1.0 + SIN_AMPLITUDE * (2.0 * std::f64::consts::PI * SIN_FREQUENCY * x).sin()
}

/// Draws `n` values on `[0, 1]`, mapped to the canonical domain. Each user
/// has its own derived generator, so the output does not depend on the
/// number of worker threads.
pub fn generate_synthetic<T: Real>(
    kind: SyntheticKind,
    n: usize,
    buckets: usize,
    root_seed: u64,
) -> Result<Population<T>> {
    if n == 0 {
        return Err(Error::Config("population size must be at least 1".into()));
    }
    let beta = Beta::new(BETA_ALPHA, BETA_BETA).expect("valid Beta parameters");
    let envelope = 1.0 + SIN_AMPLITUDE;
    let values: Vec<T> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(root_seed, i));
            let x = match kind {
                SyntheticKind::Beta25 => beta.sample(&mut rng),
                SyntheticKind::BetaSin => loop {
                    let x = beta.sample(&mut rng);
                    if rng.random::<f64>() * envelope < sin_modulation(x) {
                        break x;
                    }
                },
            };
            T::lit(2.0 * x - 1.0)
        })
        .collect();
    Population::new(values, buckets)
}

/// Which CSV column holds the values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IngestReport {
    pub rows: usize,
    pub dropped: usize,
}

/// Reads one numeric column of a headed, comma-separated file, keeps rows
/// inside `filter` and maps `[lo, hi]` affinely onto `[-1, 1]`.
pub fn ingest_csv<T: Real>(
    path: &Path,
    column: &ColumnRef,
    lo: f64,
    hi: f64,
    filter: Option<(f64, f64)>,
    buckets: usize,
) -> Result<(Population<T>, IngestReport)> {
    if !(lo < hi) {
        return Err(Error::Config(format!("invalid value range [{lo}, {hi}]")));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let idx = match column {
        ColumnRef::Index(i) => *i,
        ColumnRef::Name(name) => reader
            .headers()?
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("column `{name}` not found in {}", path.display())))?,
    };
    let mut values = Vec::new();
    let mut rows = 0;
    let mut dropped = 0;
    for record in reader.records() {
        let record = record?;
        rows += 1;
        let line = record.position().map_or(0, |p| p.line());
        let cell = record
            .get(idx)
            .ok_or_else(|| Error::Data(format!("line {line}: missing column {idx}")))?;
        let x: f64 = cell
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("line {line}: non-numeric value `{cell}`")))?;
        if let Some((flo, fhi)) = filter {
            if !(x >= flo && x <= fhi) {
                dropped += 1;
                continue;
            }
        }
        if !(x >= lo && x <= hi) {
            return Err(Error::Data(format!(
                "line {line}: value {x} is outside the declared range [{lo}, {hi}]"
            )));
        }
        values.push(T::lit(2.0 * (x - lo) / (hi - lo) - 1.0));
    }
    if values.is_empty() {
        return Err(Error::Data(format!("no rows left in {} after filtering", path.display())));
    }
    Ok((Population::new(values, buckets)?, IngestReport { rows, dropped }))
}

/// One service: its mechanism kind and privacy budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub mechanism: MechanismKind,
    pub epsilon: f64,
}

/// A set of users reporting to the same subset of services. Users are split
/// across groups in proportion to `weight`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserGroup {
    #[serde(default)]
    pub label: String,
    pub services: Vec<usize>,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Participation {
    /// Every user reports to every service.
    #[default]
    All,
    Groups(Vec<UserGroup>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServicePlan {
    pub services: Vec<ServiceSpec>,
    pub participation: Participation,
}

impl ServicePlan {
    pub fn all(services: Vec<ServiceSpec>) -> Self {
        Self { services, participation: Participation::All }
    }

    /// Problems with the plan, empty when it is usable.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.services.is_empty() {
            out.push("at least one service is required".to_string());
        }
        for (j, s) in self.services.iter().enumerate() {
            if !(s.epsilon.is_finite() && s.epsilon > 0.0) {
                out.push(format!("service {j}: epsilon must be positive, got {}", s.epsilon));
            }
        }
        if let Participation::Groups(groups) = &self.participation {
            if groups.is_empty() {
                out.push("participation groups must not be empty".to_string());
            }
            for (g, group) in groups.iter().enumerate() {
                if group.services.is_empty() {
                    out.push(format!("group {g}: service subset is empty"));
                }
                if let Some(&j) = group.services.iter().find(|&&j| j >= self.services.len()) {
                    out.push(format!("group {g}: service {j} does not exist"));
                }
                let mut sorted = group.services.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != group.services.len() {
                    out.push(format!("group {g}: repeated service"));
                }
                if !(group.weight.is_finite() && group.weight > 0.0) {
                    out.push(format!("group {g}: weight must be positive"));
                }
            }
        }
        out
    }

    pub fn mechanisms<T: Real>(&self) -> Result<Vec<Mechanism<T>>> {
        self.services.iter().map(|s| Mechanism::new(s.mechanism, T::lit(s.epsilon))).collect()
    }

    /// Service subset of every user. Group sizes follow the weights exactly
    /// (largest remainder), and membership is shuffled with `seed`.
    pub fn assignment(&self, n: usize, seed: u64) -> Vec<Vec<usize>> {
        match &self.participation {
            Participation::All => vec![(0..self.services.len()).collect(); n],
            Participation::Groups(groups) => {
                let total: f64 = groups.iter().map(|g| g.weight).sum();
                let quotas: Vec<f64> = groups.iter().map(|g| n as f64 * g.weight / total).collect();
                let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
                let mut order: Vec<usize> = (0..groups.len()).collect();
                order.sort_by(|&a, &b| {
                    let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
                    rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
                });
                let short = n - sizes.iter().sum::<usize>();
                for &g in order.iter().take(short) {
                    sizes[g] += 1;
                }
                let mut labels: Vec<usize> =
                    sizes.iter().enumerate().flat_map(|(g, &s)| std::iter::repeat_n(g, s)).collect();
                labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                labels.into_iter().map(|g| groups[g].services.clone()).collect()
            }
        }
    }
}

/// The collector's view: every user's released values.
#[derive(Clone, Debug)]
pub struct Collection<T> {
    pub users: Vec<UserObservations<T>>,
    pub services: usize,
}

impl<T: Real> Collection<T> {
    /// Values received by service `j`, in user order.
    pub fn service_view(&self, j: usize) -> Vec<T> {
        self.users
            .iter()
            .flat_map(|u| u.values.iter())
            .filter(|pv| pv.service == j)
            .map(|pv| pv.value)
            .collect()
    }

    pub fn len_values(&self) -> usize {
        self.users.iter().map(|u| u.values.len()).sum()
    }

    /// `user_id,service_id,perturbed_value` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["user_id", "service_id", "perturbed_value"])?;
        for u in &self.users {
            for pv in &u.values {
                out.write_record([u.user.to_string(), pv.service.to_string(), pv.value.to_string()])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Perturbs each user's value once per service in its subset. The draw for
/// `(user, service)` comes from its own derived stream of `seed`.
pub fn simulate_collection<T: Real>(
    population: &Population<T>,
    mechanisms: &[Mechanism<T>],
    subsets: &[Vec<usize>],
    seed: u64,
) -> Result<Collection<T>> {
    if subsets.len() != population.len() {
        return Err(Error::LengthMismatch(subsets.len(), population.len()));
    }
    let users = population
        .values()
        .par_iter()
        .zip(subsets.par_iter())
        .enumerate()
        .map(|(i, (&v, services))| {
            let values = services
                .iter()
                .map(|&j| {
                    let mech = mechanisms.get(j).ok_or_else(|| {
                        Error::Config(format!("no mechanism registered for service {j}"))
                    })?;
                    let mut rng = seed::stream_rng(seed, i as u64, j as u64);
                    Ok(PerturbedValue { service: j, value: mech.perturb_canonical(v, &mut rng)? })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(UserObservations { user: i, values })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Collection { users, services: mechanisms.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mechanism: MechanismKind, epsilon: f64) -> ServiceSpec {
        ServiceSpec { mechanism, epsilon }
    }

    #[test]
    fn population_recomputes_mean() {
        let p = Population::<f64>::new(vec![-1.0, 0.0, 0.5], 4).unwrap();
        assert!((p.true_mean() - (-0.5 / 3.0)).abs() < 1e-15);
        assert!((p.true_histogram().probs.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(Population::new(vec![1.5], 4).is_err());
        assert!(Population::<f64>::new(vec![], 4).is_err());
    }

    #[test]
    fn single_user_population() {
        let p: Population<f64> = generate_synthetic(SyntheticKind::Beta25, 1, 8, 5).unwrap();
        assert_eq!(p.len(), 1);
        assert!(p.values()[0] >= -1.0 && p.values()[0] <= 1.0);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a: Population<f64> = generate_synthetic(SyntheticKind::BetaSin, 1000, 8, 9).unwrap();
        let b: Population<f64> = generate_synthetic(SyntheticKind::BetaSin, 1000, 8, 9).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn ingest_maps_and_filters() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "id,pay\n1,10000\n2,35000\n3,60000\n4,9999").unwrap();
        let (p, report) = ingest_csv::<f64>(
            f.path(),
            &ColumnRef::Name("pay".into()),
            10000.0,
            60000.0,
            Some((10000.0, 60000.0)),
            4,
        )
        .unwrap();
        assert_eq!(p.values(), &[-1.0, 0.0, 1.0]);
        assert_eq!(report, IngestReport { rows: 4, dropped: 1 });

        // unfiltered out-of-range row is an error, not silently clamped
        let err = ingest_csv::<f64>(f.path(), &ColumnRef::Index(1), 10000.0, 60000.0, None, 4);
        assert!(err.unwrap_err().to_string().contains("line 5"));
    }

    #[test]
    fn ingest_reports_bad_cells() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "x\n1\nabc\n").unwrap();
        let err = ingest_csv::<f64>(f.path(), &ColumnRef::Index(0), 0.0, 2.0, None, 4).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = ingest_csv::<f64>(f.path(), &ColumnRef::Name("y".into()), 0.0, 2.0, None, 4);
        assert!(err.is_err());
        let mut g = tempfile::NamedTempFile::new().unwrap();
        writeln!(g, "x\n5\n").unwrap();
        assert!(ingest_csv::<f64>(g.path(), &ColumnRef::Index(0), 0.0, 10.0, Some((0.0, 1.0)), 4).is_err());
    }

    #[test]
    fn sr_only_plan_emits_atoms() {
        let pop: Population<f64> = generate_synthetic(SyntheticKind::Beta25, 500, 8, 1).unwrap();
        let plan = ServicePlan::all(vec![spec(MechanismKind::Sr, 0.7)]);
        let mechs = plan.mechanisms::<f64>().unwrap();
        let c = simulate_collection(&pop, &mechs, &plan.assignment(pop.len(), 0), 3).unwrap();
        let a = mechs[0].sr_atom().unwrap();
        assert!(c.service_view(0).iter().all(|&y| y == a || y == -a));
    }

    #[test]
    fn full_participation_counts_and_determinism() {
        let pop: Population<f64> = generate_synthetic(SyntheticKind::Beta25, 300, 8, 1).unwrap();
        let plan = ServicePlan::all(
            [MechanismKind::Sr, MechanismKind::Laplace, MechanismKind::Pm, MechanismKind::Sw]
                .iter()
                .map(|&k| spec(k, 0.5))
                .collect(),
        );
        let mechs = plan.mechanisms::<f64>().unwrap();
        let subsets = plan.assignment(pop.len(), 0);
        let a = simulate_collection(&pop, &mechs, &subsets, 42).unwrap();
        let b = simulate_collection(&pop, &mechs, &subsets, 42).unwrap();
        assert_eq!(a.len_values(), 4 * 300);
        assert_eq!(a.users, b.users);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1201);
    }

    #[test]
    fn group_assignment_follows_weights() {
        let plan = ServicePlan {
            services: vec![spec(MechanismKind::Sr, 1.0), spec(MechanismKind::Pm, 1.0)],
            participation: Participation::Groups(vec![
                UserGroup { label: "a".into(), services: vec![0], weight: 1.0 },
                UserGroup { label: "b".into(), services: vec![0, 1], weight: 3.0 },
            ]),
        };
        assert!(plan.violations().is_empty());
        let subsets = plan.assignment(1001, 4);
        let both = subsets.iter().filter(|s| s.len() == 2).count();
        assert_eq!(both, 751);
        assert_eq!(subsets, plan.assignment(1001, 4));

        let bad = ServicePlan {
            services: vec![spec(MechanismKind::Sr, 0.0)],
            participation: Participation::Groups(vec![UserGroup {
                label: String::new(),
                services: vec![3],
                weight: 1.0,
            }]),
        };
        assert_eq!(bad.violations().len(), 2);
    }
}
