use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("row {row}: {reason}")]
    Row { row: usize, reason: String },

    #[error("missing task(s): {}", .0.join(", "))]
    MissingTask(Vec<String>),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("registry capacity exceeded: {needed} problems do not fit stride {v_cap}; configure a larger v_cap")]
    Capacity { needed: usize, v_cap: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for table with {rows} rows")]
    Index { index: usize, rows: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("softmax row {0} is fully masked")]
    DegenerateRow(usize),

    #[error("batch has no scorable positions")]
    EmptyBatch,

    #[error("non-finite gradient in `{name}` (max |g| = {max_abs})")]
    NonFiniteGradient { name: String, max_abs: f64 },

    #[error("task `{0}` yields no training positions")]
    EmptyTask(String),

    #[error("task `{0}` yields no evaluation positions")]
    EmptyEval(String),

    #[error("stage {stage} (task `{task}`): {source}")]
    Stage {
        stage: usize,
        task: String,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("checkpoint integrity: {0}")]
    Integrity(String),

    #[error("data isolation violated at stage {stage}: {detail}")]
    Isolation { stage: usize, detail: String },

    #[error("numerical failure at iteration {iteration}: {detail}")]
    Numerical { iteration: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_stage(self, stage: usize, task: &str) -> Error {
        Error::Stage {
            stage,
            task: task.to_string(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad input or configuration rather than runtime failure.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Schema(_)
            | Error::Row { .. }
            | Error::MissingTask(_)
            | Error::Parameter(_)
            | Error::Capacity { .. } => true,
            Error::Stage { source, .. } => source.is_usage(),
            _ => false,
        }
    }
}
