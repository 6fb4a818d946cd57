use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("non-finite value in input")]
    NonFiniteInput,
    #[error("operation not supported for {0} representation")]
    UnsupportedMode(&'static str),
    #[error("class {0} is not present in the bank")]
    MissingClass(usize),
    #[error("overlap needs at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("task {0} has a single class; KL-based selection needs at least two")]
    SingleClassTask(usize),
    #[error("class {0} was already seen in an earlier task")]
    ClassCollision(usize),
    #[error("no trained experts")]
    NoTrainedExperts,
    #[error("unknown task {0}")]
    UnknownTask(usize),
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("cannot split {classes} classes into {tasks} tasks")]
    TooManyTasks { tasks: usize, classes: usize },
    #[error("bad IDX magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("file truncated: {0}")]
    TruncatedFile(String),
    #[error("joint reference accuracies missing or wrong length")]
    MissingReference,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("state file version {found} is not supported (expected {expected})")]
    StateVersion { expected: u32, found: u32 },
    #[error("corrupt state file: {0}")]
    CorruptState(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
