use thiserror::Error;

use crate::local_solver::LocalSolveReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("construction error: {0}")]
    Construction(String),

    #[error("conjugate evaluation did not converge (residual {residual:.3e}, tolerance {tolerance:.3e})")]
    Conjugate { residual: f64, tolerance: f64 },

    #[error("local solve stopped after {} iterations without meeting its criterion (gap {:.3e})", .0.iters, .0.gap)]
    PartialSolve(Box<LocalSolveReport>),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("reference solve failed: {0}")]
    Reference(String),

    #[error("rate fit error: {0}")]
    Fit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for CLI reporting. Convergence shortfalls are
    /// signalled separately by the harness with code 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::PartialSolve(_) | Error::Conjugate { .. } | Error::Reference(_) => 1,
            _ => 2,
        }
    }
}
