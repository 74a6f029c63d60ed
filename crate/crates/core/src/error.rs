use thiserror::Error;

/// Errors surfaced by graph generation, simulation, inference and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph spec: {0}")]
    InvalidSpec(String),
    #[error("no connected graph after {0} regeneration attempts")]
    DisconnectedAfterRetries(u32),
    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("self loop at line {line}: node {node}")]
    SelfLoop { line: usize, node: String },
    #[error("mobility rate {rate} too large: column {node} would sum to {sum} >= 1")]
    RateTooLarge { rate: f64, node: usize, sum: f64 },
    #[error("negative entry at ({row}, {col}) in Z - I")]
    NegativeEntry { row: usize, col: usize },
    #[error("beta = {beta} must be smaller than the smallest population {min_pop}")]
    BetaExceedsPopulation { beta: f64, min_pop: f64 },
    #[error("unstable step at t = {t}: compartment value {value} outside [0, 1]")]
    UnstableStep { t: usize, value: f64 },
    #[error("seed node {node} out of range for {n} nodes")]
    SeedOutOfRange { node: usize, n: usize },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("domain error in {op}: {msg}")]
    DomainError { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar((usize, usize)),
    #[error("gamma_hat entry {value} outside (0, 1)")]
    GammaOutOfRange { value: f64 },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("eigendecomposition failed: {0}")]
    EigenFailure(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
