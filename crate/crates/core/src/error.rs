use nalgebra::DVector;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure of a Newton-type nonlinear solve. Both variants carry the last
/// iterate so callers can inspect or retain it.
#[derive(Debug, Clone, Error)]
pub enum NewtonError {
    #[error("Newton did not converge in {iterations} iterations (residual {residual:e})")]
    MaxIterations {
        iterations: usize,
        residual: f64,
        last: Box<DVector<f64>>,
    },
    #[error("line search stalled after {iterations} iterations (residual {residual:e})")]
    Stalled {
        iterations: usize,
        residual: f64,
        last: Box<DVector<f64>>,
    },
}

impl NewtonError {
    pub fn last_iterate(&self) -> &DVector<f64> {
        match self {
            NewtonError::MaxIterations { last, .. } | NewtonError::Stalled { last, .. } => last,
        }
    }

    pub fn residual(&self) -> f64 {
        match self {
            NewtonError::MaxIterations { residual, .. } | NewtonError::Stalled { residual, .. } => {
                *residual
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    Mesh(String),
    #[error("tetrahedron {index} is degenerate or inverted (signed volume {volume:e})")]
    DegenerateTet { index: usize, volume: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("linear solve failed: {0}")]
    LinearSolve(String),
    #[error("singular capacitance matrix (block {block}, pivot {pivot})")]
    SingularCapacitance { block: &'static str, pivot: usize },
    #[error(transparent)]
    Newton(#[from] NewtonError),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("step {index} (t = {t}): {source}")]
    Step {
        index: usize,
        t: f64,
        #[source]
        source: Box<Error>,
    },
    #[error("eigensolver: {0}")]
    Eigen(String),
    #[error("force model is not integrable: {0}")]
    NotIntegrable(String),
    #[error("missing step history for a two-step method")]
    MissingHistory,
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error under any stage or step labels.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } | Error::Step { source, .. } => source.root(),
            e => e,
        }
    }

    /// Whether the failure is numerical rather than a configuration problem.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::LinearSolve(_)
                | Error::SingularCapacitance { .. }
                | Error::Newton(_)
                | Error::Eigen(_)
                | Error::DegenerateTet { .. }
        )
    }

    pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
        if expected == got {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected, got })
        }
    }
}
