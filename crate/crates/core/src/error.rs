use std::path::PathBuf;

/// Errors produced anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {0:?}, expected \"VTCD\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    VersionMismatch(u32),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("shape overflow: {0:?}")]
    ShapeOverflow(Vec<u64>),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("run-length encoding invalid: {0}")]
    Rle(String),
    #[error("invalid site: {0}")]
    Site(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("unknown site {0}")]
    UnknownSite(String),
    #[error("unknown video {0}")]
    UnknownVideo(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("server error {code}: {message}")]
    Remote { code: i64, message: String },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that originate in a model backend or its transport.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Error::Backend(_)
                | Error::Transport(_)
                | Error::Protocol(_)
                | Error::Remote { .. }
                | Error::UnknownSite(_)
                | Error::UnknownVideo(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
