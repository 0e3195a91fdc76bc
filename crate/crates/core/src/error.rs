use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("variable `{0}` is not assigned")]
    UnassignedVariable(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("certificate problem too large: contour degree {degree} exceeds maximum {max}")]
    DegreeTooLarge { degree: u32, max: u32 },

    #[error("ellipsoid calibration failed: required inflation exceeds cap {cap}")]
    InflationCap { cap: f64 },

    #[error("risk budget infeasible: delta_o = {delta_o} is not positive")]
    RiskBudget { delta_o: f64 },

    /// Carries the last model whose held-out loss was finite.
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize, checkpoint: Box<crate::desko::DeskoModel> },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate importance weights")]
    DegenerateWeights,

    #[error("planning failed: {0}")]
    Planning(String),
}

pub type Result<T> = std::result::Result<T, Error>;
