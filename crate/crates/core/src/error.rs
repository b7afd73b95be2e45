use thiserror::Error;

/// Errors raised by the forward-construction engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum PfppError {
    /// An argument lies outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A value could not be represented, or a bracket search ran out of range.
    #[error("numerical range error: {0}")]
    NumericalRange(String),

    /// Malformed input parameters.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// A solver precondition (e.g. kernel integrability) does not hold.
    #[error("precondition failed: {0}")]
    Precondition(String),

    /// The log-coordinate data grows at the grid edges, so it does not belong
    /// to the weighted class required by the chosen risk-aversion bounds.
    #[error("domain mismatch: {0}")]
    DomainMismatch(String),

    /// The assembled deconvolution output is not an inverse marginal.
    #[error("solution rejected: {0}")]
    SolutionRejected(String),

    /// A period solve produced a residual above the configured tolerance.
    #[error("construction failed: {0}")]
    ConstructionFailed(String),

    #[error("budget mismatch: {0}")]
    BudgetMismatch(String),

    #[error("unsupported route: {0}")]
    UnsupportedRoute(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Adaptive quadrature failed to reach its tolerance.
    #[error("quadrature did not converge: {0}")]
    Quadrature(String),
}

pub type Result<T> = std::result::Result<T, PfppError>;
