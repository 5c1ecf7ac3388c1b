use std::path::PathBuf;

use ckl_autodiff::AutodiffError;

pub type Result<T> = std::result::Result<T, CklError>;

#[derive(Debug, thiserror::Error)]
pub enum CklError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("invalid span {start}..{end} for a sentence of {len} tokens")]
    InvalidSpan { start: usize, end: usize, len: usize },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("world spec asks for {requested} facts but only {capacity} (subject, relation) keys exist")]
    Capacity { requested: usize, capacity: usize },
    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),
    #[error("missing score for task {task} at stage {stage}")]
    MissingScore { task: String, stage: usize },
    #[error("every forgetting task is n.d.")]
    AllNotDefined,
    #[error("RecAdam needs a theta0 snapshot for parameter {0}")]
    MissingTheta0(String),
    #[error("step {step} is past the schedule end {total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("tuning set shares fact ids with the probe set: {0:?}")]
    TuningOverlap(Vec<usize>),
}

impl CklError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CklError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        CklError::Json {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag for machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            CklError::Autodiff(_) => "autodiff",
            CklError::Io { .. } => "io",
            CklError::Json { .. } => "json",
            CklError::Csv { .. } => "csv",
            CklError::InvalidSpan { .. } => "invalid_span",
            CklError::Divergence(_) => "divergence",
            CklError::Config(_) => "config",
            CklError::Checkpoint(_) => "checkpoint",
            CklError::Capacity { .. } => "capacity",
            CklError::VocabularyMismatch(_) => "vocabulary_mismatch",
            CklError::MissingScore { .. } => "missing_score",
            CklError::AllNotDefined => "all_not_defined",
            CklError::MissingTheta0(_) => "missing_theta0",
            CklError::StepOutOfRange { .. } => "step_out_of_range",
            CklError::TuningOverlap(_) => "tuning_overlap",
        }
    }
}
