use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("labels are required for {0}")]
    LabelsRequired(&'static str),

    #[error("label {label} at row {row} is outside [0, {num_classes})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("task validation failed: {}", .0.join("; "))]
    Task(Vec<String>),

    #[error("source distribution has zero mass on class {0}")]
    InvalidSource(usize),

    #[error("label-shift estimate is degenerate: every class was floored to zero")]
    DegenerateEstimate,

    #[error("class {0} has positive target mass but no source samples")]
    UnsatisfiableClass(usize),

    #[error(
        "class needs samples from both domains (source {source_count}, target {target_count})"
    )]
    DegenerateClass {
        source_count: usize,
        target_count: usize,
    },

    #[error("numerical failure in Sinkhorn scaling{}: {detail}", class.map(|c| format!(" for class {c}")).unwrap_or_default())]
    Numerical {
        class: Option<usize>,
        detail: String,
    },

    #[error("undefined input: {0}")]
    Undefined(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, Error>;
