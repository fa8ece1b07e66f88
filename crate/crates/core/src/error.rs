use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // numerics
    #[error("matrix data length {len} does not match {rows}x{cols}")]
    BadShape { rows: usize, cols: usize, len: usize },
    #[error("matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("matrix is not symmetric (max relative asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("Jacobi iteration did not converge within {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("matrix is near-singular (min eigenvalue {min_eigenvalue:e}); tokens are nearly parallel")]
    NearSingular { min_eigenvalue: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    // geometry
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("scale factor {value} at token {index} is not positive")]
    NonPositiveScale { index: usize, value: f64 },
    #[error("index {index} out of range for {len} tokens")]
    IndexOutOfRange { index: usize, len: usize },

    // attention
    #[error("attention column {column} sums to zero")]
    DegenerateColumn { column: usize },
    #[error("KL support violated at position {position}: reference mass is zero where the first distribution is positive")]
    AbsoluteContinuityViolation { position: usize },
    #[error("input is not a probability distribution: {reason}")]
    NotDistribution { reason: String },

    // capo
    #[error("reference vector {index} has zero norm")]
    ZeroReference { index: usize },
    #[error("orthogonalization failed between noun phrases {first} and {second}: {source}")]
    NpPair {
        first: usize,
        second: usize,
        #[source]
        source: Box<Error>,
    },

    // atm / optim
    #[error("mixing matrix size mismatch for noun phrase {np}: expected {expected}x{expected}, got {rows}x{cols}")]
    SizeMismatch { np: usize, expected: usize, rows: usize, cols: usize },
    #[error("annotation has no object tokens")]
    EmptyObjectSet,
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),

    // prompt
    #[error("parse error at token {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("annotation schema error: {0}")]
    Schema(String),
    #[error("noun phrase spans {first} and {second} overlap")]
    Overlap { first: usize, second: usize },
    #[error("annotation index error: {0}")]
    Index(String),

    // files
    #[error("bad EMBX magic {:?} (expected \"EMBX\")", String::from_utf8_lossy(found))]
    BadMagic { found: [u8; 4] },
    #[error("unsupported EMBX version {found}")]
    BadVersion { found: u32 },
    #[error("unsupported EMBX dtype {found}")]
    BadDtype { found: u8 },
    #[error("EMBX payload truncated: expected {expected} bytes, got {got}")]
    TruncatedPayload { expected: usize, got: usize },
    #[error("EMBX payload has {extra} trailing bytes")]
    TrailingBytes { extra: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("verification failed: {0}")]
    Verification(String),
}

impl Error {
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage { stage, source: Box::new(self) }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Innermost error, skipping stage and NP-pair wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } | Error::NpPair { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 1 input/validation, 2 numerical failure, 3 verification failure.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::NonFiniteLoss { .. }
            | Error::NearSingular { .. }
            | Error::NoConvergence { .. }
            | Error::DegenerateColumn { .. } => 2,
            Error::Verification(_) => 3,
            _ => 1,
        }
    }
}
