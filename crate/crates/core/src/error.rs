use thiserror::Error;

use crate::trainer::TelemetryRow;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("matrix contains a non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("operator matricization needs {entries} entries, cap is {cap}")]
    SizeCap { entries: usize, cap: usize },

    #[error("degenerate loss: {0}")]
    DegenerateLoss(String),

    /// λ_n(D(0)) or λ_m(-D(0)) does not exist because the width is too small.
    #[error("eigenvalue index {index} out of range for a {dim}x{dim} imbalance matrix")]
    EigenIndex { index: usize, dim: usize },

    #[error(
        "initialization violates alpha1 > 0 (alpha1 = {alpha1:e}); widen the hidden layer to \
         h >= n + m with a continuous random init, or use N(0, h^(-2p)) entries with 1/4 < p < 1/2 \
         and large h"
    )]
    Alpha1NotPositive { alpha1: f64 },

    #[error("degenerate step: {0}")]
    DegenerateStep(String),

    #[error(
        "schedule infeasible at t = {t}: step cap {cap:e} is below eta0 = {eta0:e} \
         (eta0 must not exceed eta_max)"
    )]
    ScheduleInfeasible { t: u64, cap: f64, eta0: f64 },

    #[error("iterate diverged at t = {}", last_row.t)]
    Divergence { last_row: Box<TelemetryRow> },

    #[error("line search failed at t = {t} after {shrinks} shrinks")]
    LineSearchFailure { t: u64, shrinks: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
