use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("no half-max crossings: {0}")]
    NoHalfMaxCrossings(String),

    #[error("coherence time {tau_coh} ns is above the transform limit 2*T1 = {limit} ns")]
    AboveTransformLimit { tau_coh: f64, limit: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("grid ends at {grid_end} ns, before the emission time {t_emit} ns")]
    EmissionOutsideGrid { t_emit: f64, grid_end: f64 },

    #[error("transfer saturation: {0}")]
    TransferSaturation(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("envelope fully extinguishes the wavepacket")]
    FullyExtinguished,

    #[error("degenerate fit input: {0}")]
    DegenerateFit(String),

    #[error("fit did not converge after {iterations} iterations (best params {best:?})")]
    FitNotConverged { iterations: usize, best: Vec<f64> },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
