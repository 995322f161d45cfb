use thiserror::Error;

/// Every failure the library can report.
///
/// Variants map onto two CLI exit classes: configuration problems
/// (bad input, violated preconditions) and numerical failures.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum UotError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("delta {delta} violates delta*max(|Omega_f|,|Omega_g|) = {lhs} <= c = {c}")]
    InvalidDelta { delta: f64, lhs: f64, c: f64 },
    #[error("feasibility violation of magnitude {magnitude}: {what}")]
    FeasibilityViolation { what: String, magnitude: f64 },
    #[error("non-finite value in {what} at iteration {iteration}")]
    NumericalBlowup { what: String, iteration: usize },
    #[error("mass mismatch: source {source_mass}, target {target_mass}")]
    MassMismatch { source_mass: f64, target_mass: f64 },
    #[error("point {point:?} outside the range of the map at t = {t}")]
    OutOfRange { point: Vec<f64>, t: f64 },
    #[error("degenerate map: Jacobian determinant {det} at sample {index}")]
    DegenerateMap { det: f64, index: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("quadrature under-resolved: {0}")]
    Unresolved(String),
    #[error("point {point:?} outside the box [-{m}, {m}]^d")]
    OutOfBox { point: Vec<f64>, m: f64 },
    #[error("trajectory left the box [-{m}, {m}]^d at t = {t}")]
    BoxExit { t: f64, m: f64 },
    #[error("budget not met: {0}")]
    BudgetNotMet(String),
    #[error("invalid series: {0}")]
    InvalidSeries(String),
    #[error("internal error: {0}")]
    InternalError(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("format error: {0}")]
    Format(String),
}

impl UotError {
    /// True for failures caused by the numbers rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            UotError::NumericalBlowup { .. }
                | UotError::DegenerateMap { .. }
                | UotError::Unresolved(_)
                | UotError::BoxExit { .. }
                | UotError::BudgetNotMet(_)
                | UotError::InternalError(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, UotError>;
