use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },
    #[error("invalid argument to {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("input spatial size {h}x{w} is not divisible by the required multiple {multiple}")]
    Divisibility { h: usize, w: usize, multiple: usize },
    #[error("graph error: {0}")]
    Graph(String),
    #[error("parameter `{0}` is not bound")]
    UnboundParam(String),
    #[error("missing graph input `{0}`")]
    MissingInput(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("training diverged at step {step}: loss is {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("metric error: {0}")]
    Metric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }

    /// Stable machine-readable tag used by the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InvalidArgument { .. } => "invalid_argument",
            Error::Divisibility { .. } => "divisibility",
            Error::Graph(_) => "graph",
            Error::UnboundParam(_) => "unbound_param",
            Error::MissingInput(_) => "missing_input",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Metric(_) => "metric",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
