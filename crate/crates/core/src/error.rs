use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("invalid map: {0}")]
    InvalidMap(String),
    #[error("time {t:.3}s outside log span [{start:.3}, {end:.3}]")]
    OutOfRange { t: f64, start: f64, end: f64 },
    #[error("scene has {needed} rows but the layout allows {capacity}")]
    CapacityExceeded { needed: usize, capacity: usize },
    #[error("route {0:?} has no remaining arc length")]
    DegenerateRoute(String),
    #[error("unknown route {0:?}")]
    UnknownRoute(String),
    #[error("trajectory length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("forward cache does not belong to the current parameters")]
    StaleCache,
    #[error("corrupt parameter file: {0}")]
    CorruptFile(String),
    #[error("parameter dims mismatch: file {file}, expected {expected}")]
    DimMismatch { file: String, expected: String },
    #[error("both mini-batches are empty")]
    EmptyBatches,
    #[error("non-finite gradient in block {0}")]
    NonFiniteGradient(String),
    #[error("ego history covers {have:.2}s, stuck rule needs {need:.2}s")]
    InsufficientHistory { have: f64, need: f64 },
    #[error("scripted expert failed on template {template:?} after {retries} retries")]
    ExpertFailed { template: String, retries: u32 },
    #[error("log {log:?} lasts {duration:.2}s, shorter than the {window:.2}s window")]
    LogTooShort { log: String, duration: f64, window: f64 },
    #[error("dataset schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("dataset count mismatch: manifest says {manifest}, file has {actual}")]
    CountMismatch { manifest: usize, actual: usize },
    #[error("test scenario from log {0:?} appears in the training manifest")]
    TrainTestOverlap(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
