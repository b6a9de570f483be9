use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {message}")]
    InvalidParameter { field: String, message: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("density must be strictly positive, got {0}")]
    NonPositiveDensity(f64),

    #[error("frequency must be nonzero")]
    ZeroFrequency,

    #[error("state must be nonzero")]
    ZeroState,

    #[error("operation requires d = 2, got d = {0}")]
    UnsupportedDimension(usize),

    #[error("states are not lifts of (u, P): {0}")]
    NotLifted(String),

    #[error("cell {cell} holds {atoms} atoms, at most two are allowed")]
    NotDiatomic { cell: usize, atoms: usize },

    #[error("amplitude is not in the symbol kernel (residual {residual:e})")]
    NotInKernel { residual: f64 },

    #[error("states are not wave-cone-connected (residual {residual:e})")]
    NotWaveConeConnected { residual: f64 },

    #[error("grid too small: {0}")]
    GridTooSmall(String),

    #[error("coarsening factor {factor} does not divide {len}")]
    IndivisibleCoarsening { factor: usize, len: usize },

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("test dictionary is empty")]
    EmptyDictionary,

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("density floor breached: rho = {rho:e} in cell {cell} at t = {time}")]
    DensityFloor { rho: f64, cell: usize, time: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("at eps = {eps}: {source}")]
    Ladder {
        eps: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed snapshot: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::DensityFloor { .. } | Error::NonFinite(_) => true,
            Error::Ladder { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
