use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("tap {tap} out of range: valid taps are 1..={max}")]
    TapOutOfRange { tap: usize, max: usize },

    #[error("invalid tap list: {0}")]
    TapSpec(String),

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("projection head for level {level}: {reason}")]
    Projection { level: usize, reason: String },

    #[error("no projection head for contrastive level {0}")]
    MissingHead(usize),

    #[error("temperature must be positive, got {0}")]
    Temperature(f64),

    #[error("contrastive batch needs at least 2 views, got {0}")]
    BatchTooSmall(usize),

    #[error("pairing is not a fixed-point-free involution at index {0}")]
    Pairing(usize),

    #[error("image too small for augmentation: {height}x{width}, minimum side {min}")]
    ImageTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("label {label} outside 0..{classes}")]
    Label { label: usize, classes: usize },

    #[error("non-finite loss at step {step}: ce={ce}, levels={levels:?}, total={total}")]
    NonFiniteLoss {
        step: u64,
        ce: f64,
        levels: Vec<(usize, f64)>,
        total: f64,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("class {class:?} has {have} images, needs at least {need}")]
    ClassTooSmall {
        class: String,
        have: usize,
        need: usize,
    },

    #[error("episode infeasible: {0}")]
    Episode(String),

    #[error("ensemble: {0}")]
    Ensemble(String),

    #[error("evaluation needs at least 2 episodes for a confidence interval, got {0}")]
    TooFewEpisodes(usize),

    #[error("encoder parameters changed while frozen ({before} -> {after})")]
    EncoderModified { before: String, after: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
