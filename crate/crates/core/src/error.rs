use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("Riccati iteration did not converge after {0} steps")]
    RiccatiNonConvergent(usize),
    #[error("Lyapunov iteration did not converge after {0} steps")]
    LyapunovNonConvergent(usize),
    #[error("closed loop not Schur stable at p = {p:?} (spectral radius {radius})")]
    UnstableClosedLoop { p: Vec<f64>, radius: f64 },
    #[error("Cholesky factorization failed after jitter escalation")]
    Cholesky,
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),
    #[error("singular linear system in {0}")]
    Singular(&'static str),
}
