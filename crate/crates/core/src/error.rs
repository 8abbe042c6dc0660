use thiserror::Error;

/// Errors raised anywhere in the discretization, solve, or verification pipeline.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum OcpError {
    #[error("argument {value} lies outside the canonical interval [-1, 1]")]
    Domain { value: f64 },

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("node solver did not converge for N = {order} (node {index}, residual {residual:e})")]
    NodeConvergence {
        order: usize,
        index: usize,
        residual: f64,
    },

    #[error("singular dynamics at t = {t}: |g(x)| = {gain:e}{}", node_suffix(*.node))]
    SingularDynamics {
        t: f64,
        gain: f64,
        node: Option<usize>,
    },

    #[error("non-finite value from {what}{}", node_suffix(*.node))]
    NonFinite {
        what: &'static str,
        node: Option<usize>,
    },

    #[error("unknown problem '{0}'")]
    UnknownProblem(String),

    #[error("problem '{0}' has no analytic reference")]
    MissingReference(String),

    #[error("invalid options: {0}")]
    InvalidOptions(String),

    #[error("integration failed at t = {t}: {reason}")]
    Integration { t: f64, reason: String },
}

fn node_suffix(node: Option<usize>) -> String {
    match node {
        Some(k) => format!(" (node {k})"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, OcpError>;
