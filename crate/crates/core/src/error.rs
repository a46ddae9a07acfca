use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported dimension d={0} (expected 1, 2 or 3)")]
    UnsupportedDimension(usize),

    #[error("invalid coloring: {0}")]
    InvalidColoring(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value in input ({0})")]
    NonFinite(&'static str),

    #[error("velocity shift {shift:.3e} exceeds V_max/2 = {limit:.3e}")]
    ShiftTooLarge { shift: f64, limit: f64 },

    #[error("ill-posed kernel: max |k||K(k)| = {0:.3e}")]
    IllPosedKernel(f64),

    #[error("negative density at node {0}; rejection sampling needs f0 >= 0")]
    NegativeDensity(usize),

    #[error("non-finite particle velocity at index {0}")]
    ParticleNan(usize),

    #[error("numerical blow-up at step {step} (t = {time})")]
    BlowUp { step: usize, time: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty summary: {0}")]
    Empty(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
