use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("non-finite value in {op} input")]
    NonFinite { op: &'static str },

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown tape node {0}")]
    UnknownNode(usize),

    #[error("grid is {got_tokens}x{got_channels}, bank expects {want_tokens}x{want_channels}")]
    GridDimension {
        got_tokens: usize,
        got_channels: usize,
        want_tokens: usize,
        want_channels: usize,
    },

    #[error("freshly ingested grid must have unit weights")]
    NonUnitWeights,

    #[error("memory bank precondition violated: {0}")]
    BankPrecondition(String),

    #[error("memory bank is empty")]
    EmptyBank,

    #[error("bank at capacity {0} and policy `none` does not compress")]
    CapacityExceeded(usize),

    #[error("oracle limited to small instances: {0}")]
    OracleSizeLimit(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("timestep must be >= 1, got {0}")]
    InvalidTimestep(u64),

    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("feature file: {0}")]
    FeatureFormat(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
