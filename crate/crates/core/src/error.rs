use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("cannot resolve {0}")]
    Resolution(PathBuf),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("calibration was fitted against weights {expected:016x}, got {found:016x}")]
    CalibrationMismatch { expected: u64, found: u64 },
    #[error("metric error: {0}")]
    Metric(String),
    #[error("correlation undefined for constant input")]
    DegenerateCorrelation,
    #[error("unsupported state version {0}")]
    Version(u32),
}

/// Coarse failure class, used by front ends to choose exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Parameter(_) => ErrorClass::Usage,
            Error::Io { .. }
            | Error::Format(_)
            | Error::Validation(_)
            | Error::Shape(_)
            | Error::Resolution(_)
            | Error::Consistency(_)
            | Error::Schema(_)
            | Error::CalibrationMismatch { .. }
            | Error::Version(_) => ErrorClass::Data,
            Error::Fit(_) | Error::Metric(_) | Error::DegenerateCorrelation => ErrorClass::Numerical,
        }
    }
}
