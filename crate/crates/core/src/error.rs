use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GdlError {
    #[error("matrix is not symmetric: |C[{i},{j}] - C[{j},{i}]| = {gap:e}")]
    AsymmetricMatrix { i: usize, j: usize, gap: f64 },

    #[error("invalid histogram: {0}")]
    BadHistogram(String),

    #[error("feature matrix has {rows} rows, expected {expected}")]
    FeatureShapeMismatch { rows: usize, expected: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("all node masses are zero")]
    AllZeroMass,

    #[error("marginals have different total mass ({0:e} vs {1:e})")]
    InfeasibleMarginals(f64, f64),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("missing node features")]
    MissingFeatures,

    #[error("dictionary has no weight atoms")]
    MissingWeightAtoms,

    #[error("unmixing result carries no dual potentials")]
    MissingDuals,

    #[error("original graphs are required for this mode")]
    MissingGraphs,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid number of clusters k={k} for {n} points")]
    BadK { k: usize, n: usize },

    #[error("degenerate variance")]
    DegenerateVariance,

    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },

    #[error("validation error at record {record}: {msg}")]
    ValidationError { record: usize, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for GdlError {
    fn from(e: std::io::Error) -> Self {
        GdlError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, GdlError>;
