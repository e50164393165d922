use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time step {0} (must be positive)")]
    InvalidTimeStep(f64),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid system definition: {0}")]
    InvalidSystem(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no convergence after {iterations} iterations (oscillation {oscillation:.3e})")]
    NoConvergence { iterations: usize, oscillation: f64 },

    #[error("alpha mismatch: backward {backward}, forward {forward}")]
    AlphaMismatch { backward: f64, forward: f64 },

    #[error("barrier not converged: window disagreement {disagreement:.3e} at horizon {horizon}")]
    BarrierNotConverged { disagreement: f64, horizon: f64 },

    #[error("no smooth neighbors within radius {radius} of the query point")]
    NoSmoothNeighbors { radius: f64 },

    #[error("integrator accuracy: energy drift {drift:.3e} exceeds {tolerance:.3e}")]
    IntegratorAccuracy { drift: f64, tolerance: f64 },

    #[error("calibration defect {defect:.3e} exceeds {tolerance:.3e}")]
    CalibrationDefect { defect: f64, tolerance: f64 },

    #[error("empty Aubry set")]
    EmptyAubrySet,

    #[error("Aubry detection at supercritical alpha is for the critical-case pathway")]
    SupercriticalAubry,

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Name of the module an error originates from, used to tag CLI diagnostics.
    pub fn module(&self) -> &'static str {
        match self {
            Error::InvalidSystem(_) | Error::Json(_) => "model",
            Error::InvalidTimeStep(_) | Error::GridMismatch(_) | Error::BarrierNotConverged { .. } => "action",
            Error::NoConvergence { .. } | Error::AlphaMismatch { .. } => "weakkam",
            Error::NoSmoothNeighbors { .. } => "semiconcave",
            Error::IntegratorAccuracy { .. } => "characteristics",
            Error::CalibrationDefect { .. } => "characteristics",
            Error::EmptyAubrySet | Error::SupercriticalAubry => "barrier",
            Error::Precondition(_) | Error::InvalidArgument(_) => "core",
            Error::Config(_) | Error::Io(_) => "cli",
        }
    }
}
