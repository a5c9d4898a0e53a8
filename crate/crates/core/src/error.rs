use std::io;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("rejection sampler exceeded {0} consecutive rejections; check emitter physics")]
    RejectionCapExceeded(u64),

    #[error("inconsistent simulation setup: stream durations {expected} ns and {found} ns differ")]
    DurationMismatch { expected: f64, found: f64 },

    #[error("keep probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),

    #[error("gradient of N_eff undefined: no weighted occupancy under the footprint")]
    UndefinedGradient,

    #[error("cannot place {requested} nonzero pixels on a grid of {available}")]
    InfeasibleField { requested: usize, available: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("incompatible resolution levels: {0}")]
    IncompatibleLevels(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
