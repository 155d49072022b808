use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward already ran on this tape")]
    BackwardTwice,

    #[error("function is not deterministic: two identical evaluations disagree ({a} vs {b})")]
    NonDeterministic { a: f64, b: f64 },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("action {action} out of range (|A| = {num_actions})")]
    ActionOutOfRange { action: usize, num_actions: usize },

    #[error("environment stepped after episode end")]
    StepAfterDone,

    #[error("prediction rollout horizon {k} exceeds maximum {max}")]
    RolloutTooLong { k: usize, max: usize },

    #[error("config error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("evaluation mode `{mode}` is not valid for architecture `{arch}`")]
    EvalModeMismatch { mode: String, arch: String },

    #[error("non-finite loss at env step {env_steps}: {detail}")]
    NonFiniteLoss { env_steps: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
