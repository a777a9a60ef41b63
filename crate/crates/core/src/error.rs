use std::path::PathBuf;

use crate::detector::DetectorParams;
use crate::worldgen::ClassId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("class pool is empty")]
    EmptyClassPool,

    #[error("invalid box ({x1}, {y1}, {x2}, {y2})")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("could not place a {what} proposal in scene {scene} after {attempts} attempts")]
    Placement { what: &'static str, scene: u64, attempts: usize },

    #[error("class {class} has {available} instances available, {required} required")]
    InsufficientInstances { class: ClassId, available: usize, required: usize },

    #[error("{what}: expected dimension {expected}, got {actual}")]
    Dimension { what: &'static str, expected: usize, actual: usize },

    #[error("class {0} is not part of the classifier label space")]
    UnknownClass(ClassId),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),

    #[error("parameter shapes differ: {0}")]
    Shape(String),

    #[error("class {class}: expected {expected} shot features, got {actual}")]
    ShotCount { class: ClassId, expected: usize, actual: usize },

    #[error("class {0} has no shot features")]
    MissingClass(ClassId),

    #[error("prototype for class {0} is the zero vector")]
    ZeroPrototype(ClassId),

    #[error("cosine similarity of a zero vector")]
    ZeroVector,

    #[error("prediction for scene {found} does not match test scene {expected}")]
    SceneMismatch { expected: u64, found: u64 },

    #[error("{stage} diverged at step {step}: non-finite loss")]
    Diverged { stage: &'static str, step: usize, last_finite: Box<DetectorParams> },

    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
