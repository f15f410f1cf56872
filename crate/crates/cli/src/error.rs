use std::path::Path;

use meshpinn::export::ExportError;
use meshpinn::fem::FemError;
use meshpinn::mesh::MeshError;
use meshpinn::models::ModelError;
use meshpinn::training::TrainError;
use thiserror::Error;

/// Failures reported by the binary: 1 for usage or I/O, 2 for numerics.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io { .. } => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl From<MeshError> for CliError {
    fn from(e: MeshError) -> Self {
        match e {
            MeshError::Degenerate { .. } | MeshError::AmplitudeOutOfRange(_) => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<FemError> for CliError {
    fn from(e: FemError) -> Self {
        match e {
            FemError::DimensionMismatch { .. } => CliError::Usage(e.to_string()),
            FemError::NotConverged { .. } | FemError::InvalidProblem(_) => {
                CliError::Numerical(e.to_string())
            }
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Fem(e) => e.into(),
            TrainError::NonFinite { .. } | TrainError::Tape(_) => {
                CliError::Numerical(e.to_string())
            }
            TrainError::Model(_) | TrainError::InvalidConfig(_) | TrainError::MissingInput(_) => {
                CliError::Usage(e.to_string())
            }
        }
    }
}

impl From<ExportError> for CliError {
    fn from(e: ExportError) -> Self {
        CliError::Usage(e.to_string())
    }
}
