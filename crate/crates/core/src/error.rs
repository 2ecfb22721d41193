use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("privacy budget must be a finite positive number, got {0}")]
    InvalidBudget(f64),

    #[error("input {value} is outside the {mechanism} input domain [{lo}, {hi}]")]
    Domain {
        mechanism: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("{0} is not supported here: {1}")]
    UnsupportedMechanism(&'static str, &'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value {value} reported by user {user} to service {service} lies outside the output support")]
    OutsideSupport { user: usize, service: usize, value: f64 },

    #[error("no observations to aggregate")]
    Empty,

    #[error("bucket-vector group {group} has zero likelihood under every input bucket")]
    ImpossibleObservation { group: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
