use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("coefficient matrix for cos({n}x) is not symmetric (asymmetry {asymmetry:.3e})")]
    NonSymmetric { n: u32, asymmetry: f64 },

    #[error("endpoint condition fails for derivative order {order}: deviation {deviation:.3e} > {tolerance:.3e}")]
    EndpointCondition {
        order: u32,
        deviation: f64,
        tolerance: f64,
    },

    #[error("eigensolver did not converge; largest remaining off-diagonal {worst_offdiag:.3e}")]
    Numerical { worst_offdiag: f64 },

    #[error("evaluation point too close to unperturbed eigenvalue mu_{index} = {mu}")]
    PoleProximity { index: usize, mu: f64 },

    #[error("pole cluster at {value} is not isolated (radius {radius:.3e})")]
    DegenerateGap { value: f64, radius: f64 },

    #[error("quadrature failure: {0}")]
    Quadrature(String),

    #[error("contour selection: {0}")]
    ContourSelection(String),

    #[error("subsequence selection: {0}")]
    Selection(String),

    #[error("bookkeeping: {0}")]
    Bookkeeping(String),

    #[error("invariant failure: {0}")]
    Invariant(String),

    #[error("internal consistency: {0}")]
    InternalConsistency(String),

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// Process exit code: 1 for input problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Hypothesis(_)
            | Error::Scenario(_)
            | Error::NonSymmetric { .. }
            | Error::EndpointCondition { .. }
            | Error::Io(_) => 1,
            _ => 2,
        }
    }
}
