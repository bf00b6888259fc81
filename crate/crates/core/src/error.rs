use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("kernel support radius exceeds half the sheet (|W(0.5)| = {value:e} > {bound:e})")]
    KernelSupport { value: f64, bound: f64 },

    #[error("spectral coefficient at ({k1}, {k2}) has imaginary part {imag:e} above tolerance {tol:e}")]
    ComplexSpectrum { k1: i64, k2: i64, imag: f64, tol: f64 },

    #[error("activation violates the slope bound: min Φ' = {min_slope} <= 1/W0 = {bound}")]
    SlopeBound { min_slope: f64, bound: f64 },

    #[error("root bracket failed: {0}")]
    Bracket(String),

    #[error("iteration stalled: {0}")]
    Stalled(String),

    #[error("no stability crossing in [{lo}, {hi}]")]
    NoCrossing { lo: f64, hi: f64 },

    #[error("multiple stability crossings near sigma = {0:?}")]
    MultipleCrossings(Vec<f64>),

    #[error("negative density {value:e} at flat index {index} (t = {t} ms)")]
    NegativeDensity { value: f64, index: usize, t: f64 },

    #[error("non-finite value at flat index {index} (t = {t} ms)")]
    NonFinite { index: usize, t: f64 },

    #[error("time {t} ms outside trajectory span [{start}, {end}]")]
    OutsideTrajectory { t: f64, start: f64, end: f64 },

    #[error("invalid trajectory: {0}")]
    Trajectory(String),

    #[error("malformed state dump: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GridError {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        GridError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// Root-finding and threshold-search failures, as opposed to blow-ups of
    /// the time integrators.
    pub fn is_convergence_failure(&self) -> bool {
        matches!(
            self,
            GridError::Stalled(_) | GridError::NoCrossing { .. } | GridError::MultipleCrossings(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, GridError>;
