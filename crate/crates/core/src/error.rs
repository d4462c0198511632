use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("{0}: backward called without a cached forward input")]
    MissingForwardCache(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} at (n={n}, y={y}, x={x}) is outside [0, {num_classes})")]
    LabelOutOfRange {
        n: usize,
        y: usize,
        x: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("uncalibrated ReLUMax in activation slot {0}: running maximum was never recorded")]
    UncalibratedReluMax(usize),

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("not a checkpoint: bad magic bytes")]
    NotACheckpoint,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("missing calibration state: {0}")]
    MissingCalibration(String),

    #[error("fault geometry {geometry} lies outside tensor of spatial size {h}x{w}")]
    FaultOutOfBounds { geometry: String, h: usize, w: usize },

    #[error("unknown image id {0}")]
    UnknownImage(usize),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by bad input data or files rather than usage.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::InvalidArgument(_))
    }
}
