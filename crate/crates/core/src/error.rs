//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("mesh quality error: {0}")]
    MeshQuality(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("assembly produced a non-finite entry in cell {cell}")]
    NonFiniteAssembly { cell: usize },

    #[error("{solver} did not converge: reached {iterations} iterations, relative residual {residual:.3e} (tol {tol:.3e})")]
    SolverDiverged {
        solver: &'static str,
        iterations: usize,
        residual: f64,
        tol: f64,
        history: Vec<f64>,
    },

    #[error("Newton iteration did not converge after {iterations} iterations; residual history {history:?}")]
    NewtonDiverged { iterations: usize, history: Vec<f64> },

    #[error("element {cell} is inverted (det F = {det:.3e})")]
    InvertedElement { cell: usize, det: f64 },

    #[error("degenerate fiber stretch (I4f = {i4f:.3e})")]
    DegenerateStretch { i4f: f64 },

    #[error("ionic update failed at point {point}: {reason}")]
    IonicStep { point: usize, reason: String },

    #[error("non-finite state in {context}")]
    NonFiniteState { context: String },

    #[error("{scheme} step {step} failed during {stage}: {source}")]
    CouplingStep {
        scheme: &'static str,
        step: usize,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attach time-loop provenance to a sub-step failure.
    pub fn in_step(self, scheme: &'static str, step: usize, stage: &'static str) -> Error {
        Error::CouplingStep {
            scheme,
            step,
            stage,
            source: Box::new(self),
        }
    }
}
