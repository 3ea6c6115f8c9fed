use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value encountered")]
    NumericInput { op: &'static str },
    #[error("contract violated: {0}")]
    Contract(String),
}

/// Errors raised by model construction, training and checkpoint I/O.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("loss became non-finite at step {step} (lr {lr:.3e}, grad norm {grad_norm:.3e})")]
    NonFiniteLoss { step: usize, lr: f64, grad_norm: f64 },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint version mismatch: found {found:?}, expected {expected:?}")]
    Version { found: String, expected: String },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint shape mismatch for {name}: manifest {manifest:?}, model {model:?}")]
    ShapeMismatch {
        name: String,
        manifest: Vec<usize>,
        model: Vec<usize>,
    },
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors raised by the efficiency-metric engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("{0}: reference score must be positive")]
    NonPositiveReference(&'static str),
    #[error("PEoP undefined: parameter count equals the single-head reference ({0})")]
    EqualParams(u64),
    #[error("benchmark {benchmark:?} has no {model} reference row")]
    MissingReference { benchmark: String, model: String },
    #[error("malformed score table: {0}")]
    Table(String),
}
