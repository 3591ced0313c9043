use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("domain mismatch between operands")]
    DomainMismatch,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid percolation law: {0}")]
    InvalidLaw(String),

    #[error("empty cluster: {0}")]
    EmptyCluster(String),

    #[error("subcritical-looking sample: {0}")]
    SubcriticalSample(String),

    #[error("solver breakdown: {0}")]
    SolverBreakdown(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("probe within {margin} of the boundary, needs at least {needed}")]
    ProbeTooClose { needed: usize, margin: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad file format: {0}")]
    BadFormat(String),
}

pub type Result<T> = std::result::Result<T, Error>;
