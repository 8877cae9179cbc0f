use thiserror::Error;

pub type Result<T> = std::result::Result<T, DslError>;

#[derive(Debug, Error)]
pub enum DslError {
    #[error("column `{column}` has {found} rows, expected {expected}")]
    LengthMismatch {
        column: String,
        expected: usize,
        found: usize,
    },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("assumption-1 violation: sampling probability {value} in column `{column}` at row {row} is not in (0, 1]")]
    Assumption1Violation {
        column: String,
        row: usize,
        value: f64,
    },

    #[error("gold indicator column `{column}` has value {value} at row {row}; expected 0 or 1")]
    InvalidGoldIndicator {
        column: String,
        row: usize,
        value: f64,
    },

    #[error("non-finite value in column `{column}` at row {row}")]
    NonFinite { column: String, row: usize },

    #[error("outcome column `{column}` is missing at row {row} where the gold indicator is 1")]
    MissingOutcome { column: String, row: usize },

    #[error("non-numeric cell `{value}` in column `{column}` at row {row}")]
    NonNumeric {
        column: String,
        row: usize,
        value: String,
    },

    #[error("invalid fold assignment: {0}")]
    InvalidFolds(String),

    #[error("insufficient gold rows: need {needed}, found {found}")]
    InsufficientGold { needed: usize, found: usize },

    #[error("cannot train any learner: no gold-standard rows")]
    CannotTrain,

    #[error("feature width mismatch: model trained on {expected} columns, got {found}")]
    WidthMismatch { expected: usize, found: usize },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("solver did not converge after {iterations} iterations (moment norm {norm:e})")]
    NonConvergence { iterations: usize, norm: f64 },

    #[error("all {reps} replications failed in cell `{cell}` for estimator {estimator}")]
    AllReplicationsFailed {
        cell: String,
        estimator: String,
        reps: usize,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl DslError {
    /// True for failures of the numerical routines, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            DslError::SingularDesign(_)
                | DslError::NonConvergence { .. }
                | DslError::AllReplicationsFailed { .. }
        )
    }
}
