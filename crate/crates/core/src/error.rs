use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bank {bank}: {what} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        bank: usize,
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{what} is not positive definite{}", bank.map(|b| format!(" (bank {b})")).unwrap_or_default())]
    NotPositiveDefinite { what: &'static str, bank: Option<usize> },

    #[error("{what} is singular (condition estimate {condition:.3e})")]
    Singular { what: &'static str, condition: f64 },

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("forecaster of kind {kind} requires a bank index")]
    MissingBankIdentity { kind: &'static str },

    #[error("bank index {index} out of range for {n} banks")]
    BankOutOfRange { index: usize, n: usize },

    #[error("bank {bank} has a zero standardized slope; projection to fairness is undefined")]
    ZeroStandardizedSlope { bank: usize },

    #[error("all mixture densities are non-finite at the evaluation point")]
    DensityUnderflow,

    #[error("design is rank deficient: column `{column}` is linearly dependent on earlier columns")]
    RankDeficient { column: String },

    #[error("covariance needs at least two clusters, found {0}")]
    TooFewClusters(usize),

    #[error("need at least {need} banks, found {found}")]
    TooFewBanks { need: usize, found: usize },

    #[error("unknown bank id `{0}`")]
    UnknownBank(String),

    #[error("{0} is empty")]
    Empty(String),

    #[error("non-finite value in {context} at sweep {sweep}")]
    NonFinite { context: String, sweep: usize },

    #[error("models are not nested: SSR of the larger model exceeds the smaller by {excess:.3e}")]
    NotNested { excess: f64 },

    #[error("{0} requires Gaussian feature laws")]
    NonGaussian(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown estimator `{0}`")]
    UnknownEstimator(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
