//! Crate-wide error type.

/// Errors produced by any stage of the modelling pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    // --- table ingestion ---
    #[error("missing required column '{0}'")]
    MissingColumn(String),
    #[error("row {row}, column '{col}': cannot parse '{text}' as a finite number")]
    UnparseableCell { row: usize, col: String, text: String },
    #[error("row {0}: outcome value is missing")]
    MissingOutcome(usize),
    #[error("row {row}: outcome value '{text}' is not 0 or 1")]
    NonBinaryOutcome { row: usize, text: String },
    #[error("schema invalid: {0}")]
    InvalidSchema(String),
    #[error("need at least 8 rows for a 3:1 split, got {0}")]
    TooFewRows(usize),

    // --- imputation ---
    #[error("column '{0}' has too few observed values to impute")]
    TooFewObserved(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("probability {0} outside [0, 1]")]
    OutOfRange(f64),

    // --- transforms ---
    #[error("log1p undefined for {0} (entries must be > -1)")]
    DomainError(f64),
    #[error("column '{0}' is constant; cannot standardize")]
    ConstantColumn(String),
    #[error("matrix carries no variance; no components to extract")]
    DegenerateMatrix,
    #[error("dimension mismatch: expected {expected} columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    // --- model fitting ---
    #[error("information matrix is singular")]
    SingularInformation,
    #[error("outcome has no class variation")]
    NoClassVariation,
    #[error("cannot form {folds} folds from {rows} rows")]
    FoldTooSmall { rows: usize, folds: usize },
    #[error("empty node")]
    EmptyNode,
    #[error("forest contains no splits")]
    NoSplits,
    #[error("hyperparameter grid is empty")]
    GridEmpty,

    // --- evaluation ---
    #[error("need both outcome classes")]
    OneClassOnly,
    #[error("empty input")]
    EmptyInput,

    // --- synthesis ---
    #[error("infeasible generator config: {0}")]
    InfeasibleConfig(String),

    // --- orchestration / io ---
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Tag an error with the pipeline stage it happened in.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
