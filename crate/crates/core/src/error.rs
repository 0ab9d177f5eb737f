use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupted checkpoint: {0}")]
    Corrupt(String),

    #[error("digest mismatch for {}: manifest records {expected}, file hashes to {actual}", path.display())]
    Digest {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("missing file referenced by manifest: {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("non-finite loss at step {step} (epoch {epoch}): {detail}")]
    NonFinite {
        step: usize,
        epoch: usize,
        detail: String,
    },

    #[error("missing supervision: {0}")]
    MissingSupervision(String),

    #[error("class set mismatch: {0}")]
    ClassSet(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
