use thiserror::Error;

pub type Result<T> = std::result::Result<T, SeotError>;

#[derive(Debug, Error)]
pub enum SeotError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure at iteration {iteration}: {message}")]
    Numerical { iteration: usize, message: String },

    #[error("exact OT oracle supports at most {max} points, got {n}")]
    OracleTooLarge { n: usize, max: usize },

    #[error("exact OT oracle requires uniform equal-size marginals")]
    UnsupportedByOracle,

    #[error("barycenter support update requires squared-Euclidean cost (p = 2), got p = {0}")]
    UnsupportedCost(f64),

    #[error("degenerate graph: {0}")]
    DegenerateGraph(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("eigensolver did not converge after {iterations} iterations (max residual {max_residual:.3e})")]
    IterativeSolver {
        iterations: usize,
        max_residual: f64,
        residuals: Vec<f64>,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        /// Stages that finished before the failure, with what they reported.
        completed: Vec<String>,
        #[source]
        source: Box<SeotError>,
    },
}

impl SeotError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SeotError::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        SeotError::Shape(msg.into())
    }

    /// Wrap an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str, completed: Vec<String>) -> Self {
        SeotError::Stage {
            stage,
            completed,
            source: Box::new(self),
        }
    }

    /// The innermost error, looking through stage wrappers.
    pub fn root(&self) -> &SeotError {
        match self {
            SeotError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            SeotError::Numerical { .. } | SeotError::IterativeSolver { .. }
        )
    }
}
