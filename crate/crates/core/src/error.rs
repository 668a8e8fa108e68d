use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid outcome space: {0}")]
    InvalidSpace(String),

    #[error("invalid population: {0}")]
    InvalidPopulation(String),

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("empty treatment arm in cluster {cluster} (arm {arm})")]
    EmptyArm { cluster: usize, arm: u8 },

    #[error("randomization matrix singular (lambda = 1)")]
    SingularMatrix,

    #[error("missing debias row for cluster {cluster}, arm {arm}")]
    MissingDebiasRow { cluster: usize, arm: u8 },

    #[error("budget exhausted by prior estimation: target epsilon {target} <= prior budget {prior}")]
    BudgetExhausted { target: f64, prior: f64 },

    #[error("feature standardization undefined: feature {feature} has zero variance across clusters")]
    FeatureStandardization { feature: usize },

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by an infeasible privacy calibration.
    pub fn is_infeasible_calibration(&self) -> bool {
        matches!(self, Error::BudgetExhausted { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
