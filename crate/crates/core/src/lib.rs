//! Aggregation of numerical data that several services have already
//! collected under local differential privacy.
//!
//! Each user holds one value in `[-1, 1]` and has released a perturbed copy
//! of it to every service it uses, each service running its own mechanism
//! (Laplace, SR, PM or SW) and budget. A collector that pools those releases
//! can estimate
//!
//! * the population mean, by unbiased averaging ([`mean::unbiased_average`])
//!   or by per-user inverse-variance weighting driven by a Bayesian
//!   posterior over each user's value ([`mean::uwa`]), and
//! * the population histogram, by EM over the joint output buckets of each
//!   user ([`distribution::em_estimate`]),
//!
//! without spending any further privacy budget.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod discretization;
pub mod distribution;
pub mod error;
pub mod experiment;
pub mod mean;
pub mod mechanisms;
pub mod metrics;
pub mod scalar;
pub mod seed;
pub mod simulation;

pub use error::{Error, Result};
pub use mechanisms::{MechanismKind, PerturbedValue, PrivacyBudget};
pub use scalar::Real;

pub type Mechanism64 = mechanisms::Mechanism<f64>;
pub type Mechanism32 = mechanisms::Mechanism<f32>;
pub type BucketGrid64 = discretization::BucketGrid<f64>;
pub type ConditionalMatrix64 = discretization::ConditionalMatrix<f64>;
pub type Posterior64 = mean::Posterior<f64>;
pub type UserObservations64 = mean::UserObservations<f64>;
pub type HistogramEstimate64 = distribution::HistogramEstimate<f64>;
pub type Population64 = simulation::Population<f64>;
pub type HistogramEstimate32 = distribution::HistogramEstimate<f32>;
pub type Population32 = simulation::Population<f32>;
