use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },

    #[error("unknown identifier `{name}` at position {pos}")]
    UnknownIdentifier { name: String, pos: usize },

    #[error("exponent at position {pos} must be a non-negative integer literal")]
    NonIntegerExponent { pos: usize },

    #[error("domain error while evaluating expression: {0}")]
    Domain(String),

    #[error("newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonNotConverged { iterations: usize, residual: f64 },

    #[error("linear solver failure: {0}")]
    LinearSolver(String),

    #[error("invalid game specification: {0}")]
    InvalidSpec(String),

    #[error("infeasible perturbation: {0}")]
    InfeasiblePerturbation(String),

    #[error("equilibrium solve did not converge (residual {residual:e})")]
    NotConverged { residual: f64 },

    #[error("invalid settings: {0}")]
    InvalidSettings(String),

    #[error("harness failure: {0}")]
    Harness(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
