use thiserror::Error;

/// Every failure mode surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("density {value} outside the admissible range {range}")]
    Domain { value: f64, range: String },
    #[error("quadrature failed: {0}")]
    Quadrature(String),
    #[error("no certificate found: {0}")]
    Certificate(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("solver did not converge: {0}")]
    Solver(String),
    #[error("nonzero mean: {0}")]
    Mean(String),
    #[error("field is not a gradient: {0}")]
    Curl(String),
    #[error("time series out of sync: {0}")]
    Sync(String),
    #[error("time step violates CFL limit: {0}")]
    Cfl(String),
    #[error("fit window too narrow: {0}")]
    Window(String),
    #[error("under-resolved: {0}")]
    Resolution(String),
    #[error("density left the admissible band: {0}")]
    Density(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
