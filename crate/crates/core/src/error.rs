use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no railway region")]
    NoRailwayRegion,

    #[error("crop size {crop} exceeds image {height}x{width}")]
    CropTooLarge { crop: usize, height: usize, width: usize },

    #[error("obstacle exceeds frame")]
    ObstacleExceedsFrame,

    #[error("obstacle vanished: no pixel kept alpha above 0.5 after augmentation")]
    ObstacleVanished,

    #[error("object mask is empty")]
    EmptyObjectMask,

    #[error("invalid scene {scene_id}: {reason}")]
    InvalidScene { scene_id: String, reason: String },

    #[error("unknown network spec `{0}`")]
    UnknownSpec(String),

    #[error("invalid network spec {name}: {reason}")]
    InvalidSpec { name: String, reason: String },

    #[error("upsampling beyond input resolution at layer {layer}")]
    UpsamplingBeyondInput { layer: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("density size must be odd, got {0}")]
    EvenDensitySize(usize),

    #[error("density size {size} exceeds map {height}x{width}")]
    DensityTooLarge { size: usize, height: usize, width: usize },

    #[error("degenerate pool: {positives} positives, {negatives} negatives")]
    DegeneratePool { positives: usize, negatives: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("dataset {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
