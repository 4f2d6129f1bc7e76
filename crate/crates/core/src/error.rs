use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("polar angle {0} outside [0, pi]")]
    Domain(f64),
    #[error("surface radius {radius} is not positive at theta={theta}, phi={phi}")]
    NonPositiveRadius { radius: f64, theta: f64, phi: f64 },
    #[error("surface gradient is singular at the pole")]
    SingularPole,
    #[error("degenerate target: {0}")]
    DegenerateTarget(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("irradiance map has zero mean")]
    EmptyMap,
    #[error("optimizer diverged: {0}")]
    Divergence(String),
    #[error("scenario mismatch: model is {model}, request is {request}")]
    ScenarioMismatch { model: String, request: String },
    #[error("unsupported schema version {0}")]
    Schema(u32),
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
