use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("division guard in {op}: {detail}")]
    DivisionGuard { op: &'static str, detail: String },

    #[error("batch norm running statistics are uninitialized (eval mode before any training-mode pass)")]
    UninitializedStatistics,

    #[error("tensor file {path}: bad magic {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("tensor file {path}: unsupported version {found:?}")]
    VersionMismatch { path: PathBuf, found: [u8; 4] },

    #[error("tensor file {path}: truncated ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("jacobian scaling failed: min J stayed at {min_j} after {halvings} halvings")]
    FieldGeneration { min_j: f64, halvings: u32 },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("clip statistics were computed on the {0} split; only train statistics may be applied")]
    StatsFromTest(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("unknown {what}: {name}")]
    Unknown { what: &'static str, name: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
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

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
