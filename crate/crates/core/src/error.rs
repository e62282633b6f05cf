use thiserror::Error;

/// Crate-wide error type.
///
/// Variants carry a stable kebab-case code in their message so callers (and
/// the CLI exit-code mapping) can classify failures without string matching
/// on free-form text.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty-softmax: softmax over an empty vector")]
    EmptySoftmax,

    #[error("shape-mismatch: {0}")]
    ShapeMismatch(String),

    #[error("nonfinite-loss: {0}")]
    NonFiniteLoss(String),

    #[error("nonfinite-value: {0}")]
    NonFiniteValue(String),

    #[error("point-at-infinity: homogeneous depth {w:e} below tolerance")]
    PointAtInfinity { w: f64 },

    #[error("odd-dimension: rotary encoding requires even dimension, got {0}")]
    OddDimension(usize),

    #[error("degenerate-configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("ransac-failure: no model with at least 4 inliers")]
    RansacFailure,

    #[error("degenerate-homography: convex corner sampling exhausted after {attempts} attempts")]
    DegenerateHomography { attempts: usize },

    #[error("empty-supervision: no ground-truth matches or non-matches for this pair")]
    EmptySupervision,

    #[error("isolated-node: node {0} has no edges")]
    IsolatedNode(String),

    #[error("empty-eval: no error samples to integrate")]
    EmptyEval,

    #[error("no-checkpoint: {0}")]
    NoCheckpoint(String),

    #[error("invalid-config: {0}")]
    InvalidConfig(String),

    #[error("invalid-data: {0}")]
    InvalidData(String),

    #[error("missing-param: {0}")]
    MissingParam(String),

    #[error("layer {layer}: {source}")]
    AtLayer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn at_layer(self, layer: usize) -> Self {
        Error::AtLayer {
            layer,
            source: Box::new(self),
        }
    }

    /// True for failures of numeric procedures (as opposed to bad inputs).
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFiniteLoss(_)
            | Error::NonFiniteValue(_)
            | Error::PointAtInfinity { .. }
            | Error::DegenerateConfiguration(_)
            | Error::RansacFailure
            | Error::DegenerateHomography { .. }
            | Error::EmptySoftmax
            | Error::EmptyEval
            | Error::EmptySupervision => true,
            Error::AtLayer { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
