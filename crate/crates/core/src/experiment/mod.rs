//! Config-driven repeated trials: build a population, simulate the services'
//! releases, run the requested estimators and score them.

mod config;

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub use config::{
    validate_config, DatasetConfig, Estimator, ExperimentConfig, GridConfig, Precision, Scenario,
};

use crate::discretization::{conditional_matrix, BucketGrid, ConditionalMatrix, Likelihood};
use crate::distribution::{em_estimate, group_users, HistogramEstimate};
use crate::error::{Error, Result};
use crate::mean::{single_service_mean, unbiased_average, uwa, UserObservations};
use crate::mechanisms::{Mechanism, MechanismKind};
use crate::metrics::{js_divergence, kl_divergence};
use crate::scalar::Real;
use crate::seed;
use crate::simulation::{
    generate_synthetic, ingest_csv, simulate_collection, Population, ServiceSpec, SyntheticKind,
};

const POPULATION_STREAM: u64 = 0x706f70;
const ASSIGNMENT_STREAM: u64 = 0x61736e;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    SqError,
    Js,
    Kl,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Self::SqError => "sq_error",
            Self::Js => "js",
            Self::Kl => "kl",
        }
    }

    /// Column label once averaged over trials.
    pub fn summary_name(self) -> &'static str {
        match self {
            Self::SqError => "mse",
            Self::Js => "mean_js",
            Self::Kl => "mean_kl",
        }
    }
}

/// One scored estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub scenario: String,
    pub estimator: String,
    pub eps_label: String,
    pub trial: usize,
    pub metric: Metric,
    pub value: f64,
    pub wall_time: Option<f64>,
}

/// A metric averaged over all trials of one scenario and estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub scenario: String,
    pub estimator: String,
    pub eps_label: String,
    pub metric: Metric,
    pub trials: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub true_mean: f64,
    pub population: usize,
}

impl ExperimentReport {
    /// Per-trial values of one estimator and metric, in trial order.
    pub fn series(&self, scenario: &str, estimator: &str, metric: Metric) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.scenario == scenario && r.estimator == estimator && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn summary_value(&self, scenario: &str, estimator: &str, metric: Metric) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.scenario == scenario && r.estimator == estimator && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn write_results_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["scenario", "estimator", "eps_label", "trial", "metric", "value", "wall_time"])?;
        for r in &self.rows {
            out.write_record([
                r.scenario.clone(),
                r.estimator.clone(),
                r.eps_label.clone(),
                r.trial.to_string(),
                r.metric.name().to_string(),
                r.value.to_string(),
                r.wall_time.map(|t| t.to_string()).unwrap_or_default(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["scenario", "estimator", "eps_label", "metric", "trials", "value"])?;
        for r in &self.summary {
            out.write_record([
                r.scenario.clone(),
                r.estimator.clone(),
                r.eps_label.clone(),
                r.metric.summary_name().to_string(),
                r.trials.to_string(),
                r.value.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes the per-trial table to `path` and the summary next to it.
    /// Returns the summary path.
    pub fn write_outputs(&self, path: &Path) -> Result<PathBuf> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        self.write_results_csv(std::io::BufWriter::new(std::fs::File::create(path)?))?;
        let summary = summary_path(path);
        self.write_summary_csv(std::io::BufWriter::new(std::fs::File::create(&summary)?))?;
        Ok(summary)
    }
}

/// `results/run.csv` -> `results/run.summary.csv`.
pub fn summary_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.summary.csv"))
}

fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut index: HashMap<(&str, &str, &str, Metric), usize> = HashMap::new();
    let mut acc: Vec<(SummaryRow, Vec<f64>)> = Vec::new();
    for r in rows {
        let key = (r.scenario.as_str(), r.estimator.as_str(), r.eps_label.as_str(), r.metric);
        let i = *index.entry(key).or_insert_with(|| {
            acc.push((
                SummaryRow {
                    scenario: r.scenario.clone(),
                    estimator: r.estimator.clone(),
                    eps_label: r.eps_label.clone(),
                    metric: r.metric,
                    trials: 0,
                    value: 0.0,
                },
                Vec::new(),
            ));
            acc.len() - 1
        });
        acc[i].1.push(r.value);
    }
    acc.into_iter()
        .map(|(mut s, vals)| {
            s.trials = vals.len();
            s.value = crate::scalar::compensated_sum(vals.iter().copied()) / vals.len() as f64;
            s
        })
        .collect()
}

/// Estimator names for the single-service baselines: the mechanism name,
/// suffixed with the service index when a mechanism appears twice.
pub fn service_labels(services: &[ServiceSpec]) -> Vec<String> {
    services
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let dup = services.iter().filter(|o| o.mechanism == s.mechanism).count() > 1;
            if dup {
                format!("{}#{j}", s.mechanism)
            } else {
                s.mechanism.to_string()
            }
        })
        .collect()
}

fn eps_label(eps: &[f64]) -> String {
    eps.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("/")
}

/// Builds the population described by `config.dataset`.
pub fn load_population<T: Real>(config: &ExperimentConfig) -> Result<Population<T>> {
    match &config.dataset {
        DatasetConfig::Csv { path, column, lo, hi, filter } => {
            let (pop, report) =
                ingest_csv(path, column, *lo, *hi, filter.map(|[a, b]| (a, b)), config.grid.l)?;
            log::info!("{}: kept {} of {} rows", path.display(), pop.len(), report.rows);
            Ok(pop)
        }
        d => {
            let kind = d.synthetic_kind().expect("synthetic dataset");
            let n = config.n.ok_or_else(|| Error::Config("n is required".into()))?;
            generate_synthetic(kind, n, config.grid.l, seed::derive(config.seed, POPULATION_STREAM))
        }
    }
}

/// Validates `config` and runs every scenario for `config.trials` trials.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let problems = validate_config(config);
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    match config.precision {
        Precision::F64 => run_typed::<f64>(config),
        Precision::F32 => run_typed::<f32>(config),
    }
}

/// Like [`run_experiment`] at a fixed precision.
pub fn run_typed<T: Real>(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let population = load_population::<T>(config)?;
    let subsets = config.plan().assignment(population.len(), seed::derive(config.seed, ASSIGNMENT_STREAM));
    let labels = service_labels(&config.services);
    let mut rows = Vec::new();
    for scenario in config.resolved_scenarios() {
        run_scenario(config, &scenario, &population, &subsets, &labels, &mut rows)?;
    }
    Ok(ExperimentReport {
        summary: summarize(&rows),
        rows,
        true_mean: population.true_mean().to_f64_lossy(),
        population: population.len(),
    })
}

struct Setup<T> {
    mechanisms: Vec<Mechanism<T>>,
    h_grid: BucketGrid<T>,
    likelihoods: Vec<Likelihood<T>>,
    matrices: Vec<Option<ConditionalMatrix<T>>>,
    truth: Vec<T>,
}

fn setup<T: Real>(config: &ExperimentConfig, eps: &[f64], population: &Population<T>) -> Result<Setup<T>> {
    let g = &config.grid;
    let mechanisms: Vec<Mechanism<T>> = config
        .services
        .iter()
        .zip(eps)
        .map(|(s, &e)| Mechanism::new(s.mechanism, T::lit(e)))
        .collect::<Result<_>>()?;
    let h_grid = BucketGrid::canonical(g.h)?;
    let l_grid = BucketGrid::canonical(g.l)?;
    let need_uwa = config.wants(Estimator::Uwa);
    let need_em = config.wants(Estimator::Ule) || config.wants(Estimator::SingleEm);
    let mut likelihoods = Vec::new();
    let mut matrices = Vec::new();
    for (j, m) in mechanisms.iter().enumerate() {
        if need_uwa {
            likelihoods.push(match (m.kind(), g.laplace_tau_floor) {
                (MechanismKind::Laplace, Some(floor)) => {
                    Likelihood::Laplace { mechanism: *m, tau_floor: T::lit(floor) }
                }
                _ => Likelihood::for_mechanism(m, j, h_grid, g.output_resolution, g.bucket_rule)?,
            });
        }
        matrices.push(if need_em && m.kind() != MechanismKind::Laplace {
            Some(conditional_matrix(m, j, l_grid, g.output_resolution, g.bucket_rule)?)
        } else {
            None
        });
    }
    let truth = if need_em { population.histogram(g.l)?.probs } else { Vec::new() };
    Ok(Setup { mechanisms, h_grid, likelihoods, matrices, truth })
}

fn run_scenario<T: Real>(
    config: &ExperimentConfig,
    scenario: &Scenario,
    population: &Population<T>,
    subsets: &[Vec<usize>],
    labels: &[String],
    rows: &mut Vec<ResultRow>,
) -> Result<()> {
    let s = setup(config, &scenario.epsilons, population)?;
    let label = eps_label(&scenario.epsilons);
    let truth_mean = population.true_mean().to_f64_lossy();
    let all_matrices: Vec<ConditionalMatrix<T>> = s.matrices.iter().flatten().cloned().collect();

    for trial in 0..config.trials {
        log::info!("scenario {} trial {}/{}", scenario.label, trial + 1, config.trials);
        let collection =
            simulate_collection(population, &s.mechanisms, subsets, seed::trial_seed(config.seed, trial as u64))?;
        let obs = &collection.users;
        let mut push = |estimator: &str, metric: Metric, value: f64, secs: f64| {
            rows.push(ResultRow {
                scenario: scenario.label.clone(),
                estimator: estimator.to_string(),
                eps_label: label.clone(),
                trial,
                metric,
                value,
                wall_time: config.record_wall_time.then_some(secs),
            });
        };
        let sq = |m: T| (m.to_f64_lossy() - truth_mean).powi(2);

        for &est in &config.estimators {
            let start = Instant::now();
            match est {
                Estimator::Ua => {
                    let m = unbiased_average(obs, &s.mechanisms)?;
                    push("UA", Metric::SqError, sq(m), start.elapsed().as_secs_f64());
                }
                Estimator::Uwa => {
                    let r = uwa(obs, &s.mechanisms, &s.likelihoods, &s.h_grid)?;
                    if r.degenerate_users > 0 {
                        log::warn!("{} users had a degenerate posterior", r.degenerate_users);
                    }
                    push("UWA", Metric::SqError, sq(r.mean), start.elapsed().as_secs_f64());
                }
                Estimator::Ule => {
                    let counts = group_users(obs, &all_matrices)?;
                    let r = em_estimate(&counts, &all_matrices, &config.em)?;
                    let secs = start.elapsed().as_secs_f64();
                    for (metric, v) in divergences(&s.truth, &r.estimate)? {
                        push("ULE", metric, v, secs);
                    }
                }
                Estimator::SingleMean => {
                    for (j, m) in s.mechanisms.iter().enumerate() {
                        let start = Instant::now();
                        match single_service_mean(obs, m, j) {
                            Ok(v) => push(&labels[j], Metric::SqError, sq(v), start.elapsed().as_secs_f64()),
                            Err(Error::Empty) => log::warn!("service {j} received no values"),
                            Err(e) => return Err(e),
                        }
                    }
                }
                Estimator::SingleEm => {
                    for (j, matrix) in s.matrices.iter().enumerate() {
                        let Some(matrix) = matrix else { continue };
                        let start = Instant::now();
                        let own: Vec<UserObservations<T>> =
                            obs.iter().filter_map(|u| u.restrict(&[j])).collect();
                        if own.is_empty() {
                            log::warn!("service {j} received no values");
                            continue;
                        }
                        let one = std::slice::from_ref(matrix);
                        let r = em_estimate(&group_users(&own, one)?, one, &config.em)?;
                        let secs = start.elapsed().as_secs_f64();
                        for (metric, v) in divergences(&s.truth, &r.estimate)? {
                            push(&labels[j], metric, v, secs);
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

fn divergences<T: Real>(truth: &[T], estimate: &HistogramEstimate<T>) -> Result<[(Metric, f64); 2]> {
    Ok([
        (Metric::Js, js_divergence(truth, &estimate.probs)?.to_f64_lossy()),
        (Metric::Kl, kl_divergence(truth, &estimate.probs)?.to_f64_lossy()),
    ])
}

/// Human-readable description of the built-in datasets.
pub fn describe_datasets() -> String {
    let mut s = String::new();
    for kind in [SyntheticKind::Beta25, SyntheticKind::BetaSin] {
        let text = match kind {
            SyntheticKind::Beta25 => "Beta(2, 5) on [0, 1], mapped to [-1, 1] by 2x - 1. Mean 2/7 before mapping.",
            SyntheticKind::BetaSin => {
                "Beta(2, 5) density times 1 + 0.5 sin(6 pi x), renormalised and sampled by rejection; \
                 mapped to [-1, 1]. Multimodal."
            }
        };
        s.push_str(&format!("{:<10} {text}\n", kind.to_string()));
    }
    s.push_str(
        "csv        One numeric column of a headed CSV file. Rows outside `filter` are dropped, \
         the rest mapped from [lo, hi] to [-1, 1].\n",
    );
    s
}
