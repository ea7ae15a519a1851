use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("rmsnorm of an all-zero vector with eps = 0")]
    ZeroVector,

    #[error("token id {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("input patch needs a nonzero input vector")]
    ZeroInputVector,

    #[error("output weight patch needs a nonzero pre-output vector")]
    ZeroPreOutputVector,

    #[error("degenerate activation at index {index}: |h| = {activation:e} but the required change is {delta:e}")]
    DegenerateActivation {
        index: usize,
        activation: f64,
        delta: f64,
    },

    #[error("gated MLP vector is zero; cannot route the correction through W_down")]
    ZeroGatedVector,

    #[error("F(mu) evaluated on a pole at mu = {0}")]
    PoleEvaluation(f64),

    #[error("could not bracket the multiplier root within {0} doublings")]
    BracketFailure(usize),

    #[error("every g_k * m_k is zero; the inversion has no unique solution")]
    DegenerateProblem,

    #[error("layer {layer}: reconstruction residual {residual:e} exceeds bound {bound:e}")]
    LayerResidualExceeded {
        layer: usize,
        residual: f64,
        bound: f64,
    },

    #[error("not a probability vector (sum = {sum})")]
    NotAProbabilityVector { sum: f64 },

    #[error("parameter {name}: {reason}")]
    Parameter { name: String, reason: String },

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn in_layer(self, layer: usize) -> Error {
        Error::Layer {
            layer,
            source: Box::new(self),
        }
    }

    /// Strips any layer wrapping.
    pub fn root(&self) -> &Error {
        match self {
            Error::Layer { source, .. } => source.root(),
            e => e,
        }
    }
}

pub(crate) fn check_len(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { op, expected, got })
    }
}
