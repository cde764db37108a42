use crate::ClassId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("vector norm {0:e} is below 1e-12; embedding is degenerate")]
    ZeroNorm(f64),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("duplicate class id {0}")]
    DuplicateClassId(ClassId),
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("unknown class id {0}")]
    UnknownClass(ClassId),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("taxonomy of {classes} classes cannot be split into {folds} folds")]
    IndivisibleTaxonomy { classes: usize, folds: usize },
    #[error("could not reach IoU {target} for class {class} (region of {area} pixels)")]
    UnreachableIoU { class: ClassId, target: f64, area: usize },
    #[error("insufficient scenes: {0}")]
    InsufficientScenes(String),
    #[error("class subset has no evaluable class")]
    EmptySubset,
    #[error("class {0} is seen during training and cannot be evaluated as novel")]
    SeenClassLeak(ClassId),
    #[error("background class {0} missing from the class set")]
    MissingBackground(ClassId),
    #[error("few-shot prediction {0} lies outside the episode's classes")]
    RestrictionViolated(ClassId),
    #[error("prompts changed during evaluation")]
    PromptsMutated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
