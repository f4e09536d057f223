use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate point ({x}, {y}): projective denominator {w} is within epsilon of zero")]
    DegeneratePoint { x: f64, y: f64, w: f64 },

    #[error("point ({x}, {y}) lies on a coordinate axis and cannot be mapped by a scale-only homography")]
    UnmappablePoint { x: f64, y: f64 },

    #[error("mapping ({px}, {py}) -> ({dx}, {dy}) requires a non-positive scale")]
    SignDegenerate { px: f64, py: f64, dx: f64, dy: f64 },

    #[error("grid cell ({row}, {col}): {source}")]
    Cell {
        row: usize,
        col: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("missing {what}: {detail}")]
    Missing { what: String, detail: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
