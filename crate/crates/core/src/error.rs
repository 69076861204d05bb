use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    /// The active support leaves some bus without a path to a substation,
    /// or the resulting matrices are numerically singular.
    #[error("singular topology: line indicator support does not reach every bus")]
    SingularTopology,

    #[error("effective injection covariance is not positive definite")]
    SingularSigmaAlpha,

    #[error("insufficient data: need at least 2 voltage rows, got {0}")]
    InsufficientData(usize),

    #[error("step size collapsed at iteration {iteration} after {halvings} halvings")]
    StepSizeCollapse { iteration: usize, halvings: usize },

    #[error("line infrastructure admits no spanning forest")]
    DisconnectedInfrastructure,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
