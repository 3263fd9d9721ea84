use thiserror::Error;

/// Errors produced by the simulator and its numeric building blocks.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("configuration error: {key}: {constraint}")]
    Config { key: String, constraint: String },

    #[error("non-finite value in {context} (round {round:?}, client {client:?})")]
    NumericFailure {
        context: String,
        round: Option<usize>,
        client: Option<usize>,
    },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("noise multiplier is zero: privacy loss is unbounded")]
    InfinitePrivacyLoss,

    #[error("privacy ledger has no RDP orders")]
    EmptyLedger,

    #[error("optimal ratio undefined: all variances are zero")]
    UndefinedRatio,

    #[error("optimal lambda is unbounded ({0})")]
    UnboundedLambda(&'static str),

    #[error("round skipped: no group available for aggregation")]
    RoundSkipped,

    #[error("infeasible design: {samples} samples cannot support dimension {dim}")]
    InfeasibleDesign { samples: usize, dim: usize },

    #[error("insufficient pool: label {label} has {available} examples, {required} required")]
    InsufficientPool {
        label: u8,
        available: usize,
        required: usize,
    },

    #[error("IDX parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("I/O error: {0}")]
    Io(String),

    #[error("target unreachable: {0}")]
    Range(String),
}

impl Error {
    pub fn config(key: impl Into<String>, constraint: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            constraint: constraint.into(),
        }
    }

    pub(crate) fn numeric(context: impl Into<String>) -> Self {
        Error::NumericFailure {
            context: context.into(),
            round: None,
            client: None,
        }
    }

    /// Attach round/client context to a numeric failure; other variants pass through.
    pub fn at(self, round: usize, client: Option<usize>) -> Self {
        match self {
            Error::NumericFailure { context, .. } => Error::NumericFailure {
                context,
                round: Some(round),
                client,
            },
            other => other,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
