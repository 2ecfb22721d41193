use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::discretization::BucketRule;
use crate::distribution::EmConfig;
use crate::error::{Error, Result};
use crate::mechanisms::MechanismKind;
use crate::simulation::{ColumnRef, Participation, ServicePlan, ServiceSpec, SyntheticKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    #[serde(rename = "beta25")]
    Beta25,
    BetaSin,
    Csv {
        path: PathBuf,
        column: ColumnRef,
        lo: f64,
        hi: f64,
        #[serde(default)]
        filter: Option<[f64; 2]>,
    },
}

impl DatasetConfig {
    pub fn synthetic_kind(&self) -> Option<SyntheticKind> {
        match self {
            Self::Beta25 => Some(SyntheticKind::Beta25),
            Self::BetaSin => Some(SyntheticKind::BetaSin),
            Self::Csv { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "UA")]
    Ua,
    #[serde(rename = "UWA")]
    Uwa,
    #[serde(rename = "ULE")]
    Ule,
    /// Each service's own unbiased mean.
    #[serde(rename = "single_mean")]
    SingleMean,
    /// Each bounded service's own EM histogram.
    #[serde(rename = "single_em")]
    SingleEm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    /// Input buckets for Bayesian updating.
    pub h: usize,
    /// Input buckets for distribution estimation.
    pub l: usize,
    /// Output buckets for PM and SW.
    pub output_resolution: usize,
    pub bucket_rule: BucketRule,
    /// Floor on the Laplace truncation half-width; defaults to the input
    /// bucket width.
    pub laplace_tau_floor: Option<f64>,
    /// Upper bound on the number of possible bucket vectors for ULE.
    pub max_bucket_vectors: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            h: 64,
            l: 64,
            output_resolution: 32,
            bucket_rule: BucketRule::Exact,
            laplace_tau_floor: None,
            max_bucket_vectors: 1 << 24,
        }
    }
}

/// A named budget assignment, one ε per service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub label: String,
    pub epsilons: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: DatasetConfig,
    /// Population size for synthetic datasets.
    #[serde(default)]
    pub n: Option<usize>,
    pub services: Vec<ServiceSpec>,
    #[serde(default)]
    pub participation: Participation,
    pub estimators: Vec<Estimator>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub em: EmConfig,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// Explicit budget assignments; each overrides the services' ε.
    #[serde(default)]
    pub scenarios: Vec<Scenario>,
    /// Shorthand for one scenario per value with every service at that ε.
    #[serde(default)]
    pub sweep_epsilon: Vec<f64>,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "default_true")]
    pub record_wall_time: bool,
}

fn default_name() -> String {
    "experiment".to_string()
}

fn default_trials() -> usize {
    50
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        // relative CSV paths are resolved against the config file
        if let DatasetConfig::Csv { path: data, .. } = &mut cfg.dataset {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        Ok(cfg)
    }

    pub fn plan(&self) -> ServicePlan {
        ServicePlan { services: self.services.clone(), participation: self.participation.clone() }
    }

    /// The budget assignments to run, in order.
    pub fn resolved_scenarios(&self) -> Vec<Scenario> {
        let mut out = self.scenarios.clone();
        out.extend(self.sweep_epsilon.iter().map(|&e| Scenario {
            label: format!("eps={e}"),
            epsilons: vec![e; self.services.len()],
        }));
        if out.is_empty() {
            out.push(Scenario {
                label: "base".to_string(),
                epsilons: self.services.iter().map(|s| s.epsilon).collect(),
            });
        }
        out
    }

    pub fn wants(&self, e: Estimator) -> bool {
        self.estimators.contains(&e)
    }
}

/// Every rule `config` breaks, as `field: reason`. Empty means valid.
pub fn validate_config(config: &ExperimentConfig) -> Vec<String> {
    let mut v = Vec::new();
    if config.trials == 0 {
        v.push("trials: must be at least 1".to_string());
    }
    match (&config.dataset, config.n) {
        (DatasetConfig::Csv { lo, hi, filter, .. }, _) => {
            if !(lo < hi) {
                v.push(format!("dataset: lo ({lo}) must be below hi ({hi})"));
            }
            if let Some([a, b]) = filter {
                if !(a <= b) {
                    v.push(format!("dataset.filter: [{a}, {b}] is empty"));
                }
            }
        }
        (_, None) | (_, Some(0)) => v.push("n: synthetic datasets need n >= 1".to_string()),
        _ => {}
    }
    if config.estimators.is_empty() {
        v.push("estimators: at least one estimator is required".to_string());
    }
    v.extend(config.plan().violations().into_iter().map(|m| format!("services: {m}")));
    for s in &config.scenarios {
        if s.epsilons.len() != config.services.len() {
            v.push(format!(
                "scenarios.{}: {} budgets for {} services",
                s.label,
                s.epsilons.len(),
                config.services.len()
            ));
        }
    }
    for s in config.resolved_scenarios() {
        if let Some(e) = s.epsilons.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
            v.push(format!("scenarios.{}: epsilon must be positive, got {e}", s.label));
        }
    }
    let g = &config.grid;
    if g.h < 2 {
        v.push(format!("grid.h: must be at least 2, got {}", g.h));
    }
    if g.l < 2 {
        v.push(format!("grid.l: must be at least 2, got {}", g.l));
    }
    if g.output_resolution < 2 {
        v.push(format!("grid.output_resolution: must be at least 2, got {}", g.output_resolution));
    }
    if let Some(t) = g.laplace_tau_floor {
        if !(t >= 0.0) {
            v.push("grid.laplace_tau_floor: must be non-negative".to_string());
        }
    }
    if config.wants(Estimator::Ule) {
        if config.services.iter().any(|s| s.mechanism == MechanismKind::Laplace) {
            v.push("estimators: ULE cannot use a Laplace service (unbounded output)".to_string());
        }
        let combos = config.services.iter().try_fold(1u64, |acc, s| {
            let h = if s.mechanism == MechanismKind::Sr { 2 } else { g.output_resolution as u64 };
            acc.checked_mul(h)
        });
        match combos {
            Some(c) if c <= g.max_bucket_vectors => {}
            _ => v.push(format!(
                "grid.max_bucket_vectors: ULE bucket-vector space exceeds {}",
                g.max_bucket_vectors
            )),
        }
    }
    if config.wants(Estimator::Ule) || config.wants(Estimator::SingleEm) {
        if !(config.em.threshold > 0.0) {
            v.push("em.threshold: must be positive".to_string());
        }
        if config.em.max_iterations == 0 {
            v.push("em.max_iterations: must be at least 1".to_string());
        }
        if !(config.em.floor >= 0.0 && config.em.floor < 1.0 / g.l.max(1) as f64) {
            v.push("em.floor: must lie in [0, 1/l)".to_string());
        }
    }
    v
}
