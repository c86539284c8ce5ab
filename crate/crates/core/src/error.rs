use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A state became non-finite while integrating.
    #[error("integration diverged at stage {stage}{}", fmt_interval(*.interval))]
    Divergence {
        stage: usize,
        interval: Option<usize>,
    },

    /// The initial rollout of a solve already diverged.
    #[error("initial rollout diverged at stage {stage}{}", fmt_interval(*.interval))]
    UnstableInitialization {
        stage: usize,
        interval: Option<usize>,
    },

    #[error("non-finite cost at stage {stage}")]
    CostEvaluation { stage: usize },

    #[error("control weighting R is not positive definite at stage {stage}")]
    NotPositiveDefinite { stage: usize },

    /// Regularization of `H = R + B'SB` exceeded its cap.
    #[error("LQ subproblem is not convex at stage {stage} (regularization {mu:e} exceeded cap)")]
    NonConvex { stage: usize, mu: f64 },

    #[error("KKT system is singular")]
    DegenerateKkt,

    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

fn fmt_interval(interval: Option<usize>) -> String {
    match interval {
        Some(k) => format!(" (shooting interval {k})"),
        None => String::new(),
    }
}

impl Error {
    /// Re-tags a divergence error with its global stage and interval.
    pub(crate) fn at(self, stage: usize, interval: Option<usize>) -> Self {
        match self {
            Error::Divergence { .. } => Error::Divergence { stage, interval },
            other => other,
        }
    }

    pub(crate) fn dim(what: &'static str, expected: usize, found: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            found,
        }
    }
}
