use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to read image {path}: {source}")]
    ImageDecode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("image {width}x{height} is smaller than one {patch}x{patch} patch")]
    ImageTooSmall { width: usize, height: usize, patch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("grid shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("empty search set for row {row}")]
    EmptySearchSet { row: usize },
    #[error("reference set is empty")]
    EmptyReferences,
    #[error("one-class SVM did not converge after {iterations} iterations (KKT gap {gap:e})")]
    SolverNotConverged { iterations: usize, gap: f64 },
    #[error("invalid training set: {0}")]
    InvalidTrainSet(String),
    #[error("partial order domain mismatch: {0}")]
    DomainMismatch(String),
    #[error("negative slack {0}")]
    NegativeSlack(f64),
    #[error("rank {rank} outside 1..={gallery}")]
    RankOutOfRange { rank: usize, gallery: usize },
    #[error("need at least {needed} items, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("zero variance input")]
    ZeroVariance,
    #[error("missing external score for probe {probe}, gallery {gallery}")]
    MissingScore { probe: String, gallery: String },
    #[error("annotation: {0}")]
    Annotation(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
