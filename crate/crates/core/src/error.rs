use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected n = {expected}, found n = {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("point lies on the vertical axis (horizontal norm {horizontal_norm:e})")]
    AxisPoint { horizontal_norm: f64 },

    #[error("argument outside the domain: {0}")]
    Domain(String),

    #[error("geodesic between vertically aligned points is not unique")]
    UnsupportedGeodesic,

    #[error("{tuples} support tuples exceed the budget of {budget}")]
    SizeBudget { tuples: usize, budget: usize },

    #[error("infeasible transport problem: {0}")]
    Infeasible(String),

    #[error("no convergence after {iterations} iterations (marginal residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("no barycenter index entry within the merge tolerance")]
    NotFound,

    #[error("barycenter map is not injective: {} tuples share one barycenter", witnesses.len())]
    C1Violation { witnesses: Vec<Vec<usize>> },

    #[error("potential is not differentiable at the requested point: {0}")]
    NonDifferentiable(String),

    #[error("point excluded from the map domain: {0}")]
    Excluded(String),

    #[error("barycenter of charged tuple {tuple:?} is not unique ({candidates} candidates)")]
    Ambiguity {
        tuple: Vec<usize>,
        candidates: usize,
    },

    #[error("malformed input: {0}")]
    Format(String),

    #[error("weights sum to {sum}, outside the accepted band")]
    WeightSum { sum: f64 },

    #[error("density has zero total mass on the grid")]
    DegenerateDensity,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
