use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum KakinumaError {
    #[error("constraint violated: {0}")]
    ConstraintViolation(String),
    #[error("invalid expansion spec: {0}")]
    InvalidSpec(String),
    #[error("bordered base matrix is singular")]
    SingularBorderedMatrix,
    #[error("degenerate denominator {0:e} (layer thickness collapsing)")]
    DegenerateDenominator(f64),
    #[error("field mean {0:e} exceeds the solvability tolerance")]
    NonZeroMean(f64),
    #[error("cavitation in layer {layer}: min H = {min_h:e}")]
    Cavitation { layer: usize, min_h: f64 },
    #[error("index {index} out of range for {count} components")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("linear solver failed: {0}")]
    SolverSingular(String),
    #[error("gauge multiplier {0:e} exceeds tolerance for a compatible right-hand side")]
    GaugeInconsistency(f64),
    #[error("layer expressions for dzeta/dt disagree: relative mismatch {0:e}")]
    CompatibilityViolation(f64),
    #[error("step rejected: {0}")]
    StepRejected(String),
    #[error("only {kept} samples above the noise floor, {required} required")]
    BelowNoiseFloor { kept: usize, required: usize },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
}

pub type Result<T> = std::result::Result<T, KakinumaError>;
