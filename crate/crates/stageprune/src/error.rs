//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Matrix or image dimensions do not match what the operation requires.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// Cholesky factorization failed: the (damped) Hessian is not positive
    /// definite, or a selected submatrix is singular.
    #[error("singular hessian: {0}")]
    SingularHessian(String),

    /// A configuration value is out of range or internally inconsistent.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Timestep outside the `[1, T]` range of the noise schedule.
    #[error("invalid timestep {t} (schedule has {total} steps)")]
    InvalidTimestep { t: usize, total: usize },

    /// Training loss became non-finite.
    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    TrainingDiverged { epoch: usize, loss: f64 },

    /// Every calibration activation had zero norm; no score can be formed.
    #[error("degenerate activations: {0}")]
    DegenerateActivations(String),

    /// A (stage, layer, level) entry required by the database is missing.
    #[error("incomplete trajectory: {0}")]
    IncompleteTrajectory(String),

    /// A sparsity schedule violates length, bound, or budget constraints.
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    /// A reference-based metric was requested without its reference cache.
    #[error("missing reference: {0}")]
    MissingReference(String),

    /// Generic invalid input (empty sample set, malformed file, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 numerical, 4 incomplete db.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_)
            | Error::InvalidSchedule(_)
            | Error::InvalidTimestep { .. }
            | Error::InvalidShape(_)
            | Error::InvalidInput(_)
            | Error::MissingReference(_) => 2,
            Error::SingularHessian(_)
            | Error::TrainingDiverged { .. }
            | Error::DegenerateActivations(_) => 3,
            Error::IncompleteTrajectory(_) => 4,
            Error::Io(_) => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_pinned() {
        assert_eq!(Error::InvalidConfig(String::new()).exit_code(), 2);
        assert_eq!(Error::InvalidSchedule(String::new()).exit_code(), 2);
        assert_eq!(Error::SingularHessian(String::new()).exit_code(), 3);
        assert_eq!(
            Error::TrainingDiverged {
                epoch: 0,
                loss: f64::NAN
            }
            .exit_code(),
            3
        );
        assert_eq!(Error::IncompleteTrajectory(String::new()).exit_code(), 4);
    }
}
