use thiserror::Error;

/// Errors surfaced by dataset validation, estimation, and the CLI layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cluster '{cluster_id}' has no outcomes")]
    EmptyCluster { cluster_id: String },

    #[error("duplicate cluster id '{cluster_id}'")]
    DuplicateCluster { cluster_id: String },

    #[error("cluster '{cluster_id}' contains a non-binary outcome {value}")]
    NonBinaryOutcome { cluster_id: String, value: f64 },

    #[error("cluster '{cluster_id}' has {n1} outcomes under treatment but {n0} under control")]
    PotentialLengthMismatch {
        cluster_id: String,
        n1: usize,
        n0: usize,
    },

    #[error("dataset must contain at least one treated and one control cluster")]
    SingleArm,

    #[error("treatment arm {arm} is empty")]
    EmptyArm { arm: u8 },

    #[error("odds ratio requires binary outcomes")]
    BinaryRequired,

    #[error("estimand undefined: overall mean in arm {arm} is {value}")]
    DegenerateEstimand { arm: u8, value: f64 },

    #[error("arm {arm} aggregate proportion {value} is degenerate for the odds transform")]
    DegenerateArm { arm: u8, value: f64 },

    #[error("cluster proportions at the 0/1 boundary in clusters: {}", clusters.join(", "))]
    BoundednessViolation { clusters: Vec<String> },

    #[error("weighted mean outcome in arm {arm} is {value}; logistic fit is separated")]
    Separation { arm: u8, value: f64 },

    #[error("{what} did not converge after {iterations} iterations")]
    NonConvergence { what: String, iterations: usize },

    #[error("variance is inestimable: {reason}")]
    InestimableVariance { reason: String },

    #[error("design information matrix is rank deficient")]
    RankDeficient,

    #[error("{what} must lie in {range}; got {value}")]
    DomainError {
        what: String,
        range: String,
        value: f64,
    },

    #[error("no data rows")]
    NoData,

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("expected header '{expected}', found '{found}'")]
    BadHeader { expected: String, found: String },

    #[error("cluster '{cluster_id}' carries both treatment values")]
    MixedTreatment { cluster_id: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("every analysis cell failed")]
    AllCellsFailed,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// CLI exit code: 1 for input/validation problems, 2 for estimation failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DegenerateEstimand { .. }
            | Error::DegenerateArm { .. }
            | Error::BoundednessViolation { .. }
            | Error::Separation { .. }
            | Error::NonConvergence { .. }
            | Error::InestimableVariance { .. }
            | Error::RankDeficient
            | Error::AllCellsFailed => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
