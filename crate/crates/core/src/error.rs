use std::path::PathBuf;

use thiserror::Error;

use crate::hexgrid::HexCell;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid coordinate: lat={lat}, lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },

    #[error("resolution {res} outside [{min}, {max}]")]
    Resolution { res: u8, min: u8, max: u8 },

    #[error("resolution mismatch: {0} vs {1}")]
    ResolutionMismatch(HexCell, HexCell),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{0}")]
    Format(String),

    #[error("need at least {needed} sequences, got {got}")]
    TooFewSequences { needed: usize, got: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown cell or token: {0}")]
    UnknownToken(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("search space too large: {0}")]
    SearchSpace(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("cell {0} is not active in the map")]
    InactiveCell(HexCell),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
