use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed NIfTI header: {field}: {detail}")]
    Header { field: &'static str, detail: String },

    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error("unsupported dimensionality: {0}")]
    Dimensionality(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("invalid weight file: {0}")]
    WeightFormat(String),

    #[error("weight file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("weight manifest violations: {}", .0.join("; "))]
    Manifest(Vec<String>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's inputs (files, flags) rather
    /// than by the engine itself. The CLI maps these to exit code 2.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Header { .. }
                | Error::Unsupported(_)
                | Error::Dimensionality(_)
                | Error::Geometry(_)
                | Error::WeightFormat(_)
                | Error::Version { .. }
                | Error::Manifest(_)
                | Error::Config(_)
        )
    }
}
