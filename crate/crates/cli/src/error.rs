use thiserror::Error;
use voxnav::Error;

/// Failure classes, each with its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Algorithm(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Algorithm(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) | Error::ShapeMismatch { .. } | Error::SliceOutOfRange { .. } => CliError::Config(msg),
            Error::Io { .. }
            | Error::Json(_)
            | Error::Png(_)
            | Error::MalformedHeader(_)
            | Error::VersionMismatch { .. }
            | Error::DimensionMismatch(_)
            | Error::Truncated { .. }
            | Error::Dataset(_)
            | Error::EmptyDataset => CliError::Io(msg),
            Error::NoPath | Error::TaskSampling { .. } | Error::TrackingFailure | Error::DegenerateRotation { .. } | Error::Empty(_) => {
                CliError::Algorithm(msg)
            }
        }
    }
}
