use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("vector has no positive mass or contains negative entries")]
    ZeroMass,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("q has zero mass at index {index} where p is positive")]
    SupportMismatch { index: usize },
    #[error("Dirichlet slice {slice} sums to zero")]
    ZeroSlice { slice: usize },
    #[error("non-finite value in input")]
    NonFinite,
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("depth {depth} exceeds the class bound {max}")]
    DepthExceeded { depth: usize, max: usize },
    #[error("length mismatch for {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("joint space of {size} configurations exceeds the limit {max}")]
    TooLarge { size: f64, max: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("policy space of {count} policies exceeds the limit {max}")]
    PolicySpaceTooLarge { count: f64, max: usize },
    #[error("planning horizon reaches time {reach} but the model horizon is {horizon}")]
    HorizonExceeded { reach: usize, horizon: usize },
    #[error("innovation covariance not invertible at step {step}")]
    DegenerateCovariance { step: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("cardinality mismatch: parent offers {parent}, child expects {child}")]
    CardinalityMismatch { parent: usize, child: usize },
    #[error("no child run for parent outcome value {value}")]
    MissingChildRun { value: usize },
    #[error("fit diverged: {0}")]
    FitDiverged(String),
    #[error("episode is done")]
    EpisodeDone,
    #[error("invalid action {0}")]
    InvalidAction(usize),
    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("serialisation: {0}")]
    Serialisation(String),
}

impl Error {
    pub(crate) fn at_layer(self, index: usize) -> Self {
        Error::Layer {
            index,
            source: Box::new(self),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialisation(e.to_string())
    }
}
