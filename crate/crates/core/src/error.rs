use num_complex::Complex64;
use thiserror::Error;

/// Every failure the library reports. [`Error::code`] gives the stable
/// machine-readable identifier used on the command line.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("significand width {0} outside [8, 4096]")]
    BitsOutOfRange(u32),
    #[error("time step must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("seed mode must be `floor` or `inject:<amplitude>`, got `{0}`")]
    InvalidSeedMode(String),
    #[error("invalid loop geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("geometry is outside the classified loop families")]
    Unclassified,
    #[error("eigenvectors coalesce at z = {z}: |1 - z^2| = {distance:e}")]
    EpDegeneracy { z: Complex64, distance: f64 },
    #[error("Im E(t) never changes sign along the loop")]
    NoExchange,
    #[error("closed-form energy is outside its validity domain: {0}")]
    ApproxInvalid(String),
    #[error("{0}")]
    NotApplicable(String),
    #[error("seed amplification does not reach unit magnitude within the period")]
    NoCrossing,
    #[error("halving the step moved {quantity} by {deviation:.3e} (limit {limit:.3e})")]
    StepTooCoarse { quantity: String, deviation: f64, limit: f64 },
    #[error("no transition below T = {t_max}")]
    NoTransition { t_max: f64 },
    #[error("end-of-period ratio already exceeds the crossing level at the scan start T = {t_start}")]
    AboveThresholdAtStart { t_start: f64 },
    #[error("need at least {needed} converged points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("plateau varies by {spread:.3} relative (limit 0.25)")]
    NoPlateau { spread: f64 },
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::BitsOutOfRange(_) => "BITS_OUT_OF_RANGE",
            Error::InvalidStep(_) => "INVALID_STEP",
            Error::InvalidSeedMode(_) => "INVALID_SEED_MODE",
            Error::InvalidGeometry(_) => "INVALID_GEOMETRY",
            Error::InvalidArgument(_) => "INVALID_ARGUMENT",
            Error::Unclassified => "UNCLASSIFIED",
            Error::EpDegeneracy { .. } => "EP_DEGENERACY",
            Error::NoExchange => "NO_EXCHANGE",
            Error::ApproxInvalid(_) => "APPROX_INVALID",
            Error::NotApplicable(_) => "NOT_APPLICABLE",
            Error::NoCrossing => "NO_CROSSING",
            Error::StepTooCoarse { .. } => "STEP_TOO_COARSE",
            Error::NoTransition { .. } => "NO_TRANSITION",
            Error::AboveThresholdAtStart { .. } => "ABOVE_THRESHOLD_AT_START",
            Error::InsufficientPoints { .. } => "INSUFFICIENT_POINTS",
            Error::NoPlateau { .. } => "NO_PLATEAU",
        }
    }

    /// Input-validation failures, as opposed to numerical outcomes.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::BitsOutOfRange(_)
                | Error::InvalidStep(_)
                | Error::InvalidSeedMode(_)
                | Error::InvalidGeometry(_)
                | Error::InvalidArgument(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
