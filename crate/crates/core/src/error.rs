use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid severity law: {0}")]
    InvalidSeverity(String),

    #[error("too many lines for subset enumeration: {lines} (limit {limit})")]
    TooManyLines { lines: usize, limit: usize },

    #[error("lattice step mismatch: {left} vs {right}")]
    StepMismatch { left: f64, right: f64 },

    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("mixture weights must be nonnegative and sum to 1 (sum = {0})")]
    MixtureWeights(f64),

    #[error("invalid reinsurance contract: {0}")]
    InvalidContract(String),

    #[error("candidate count {count} exceeds cap {cap}")]
    CandidateCap { count: usize, cap: usize },

    #[error("candidate space needs {needed} cached history values, budget is {budget}")]
    HistoryBudget { needed: usize, budget: usize },

    #[error("no feasible reinsurance candidate (all net premiums <= {0})")]
    NoFeasibleCandidate(f64),

    #[error("grid index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("derivative minimum sits at the domain boundary x = {x_max}; increase x_max")]
    BoundaryArgmin { x_max: f64 },

    #[error("band partition violates structure: {0}")]
    PartitionStructure(String),

    #[error("invalid simulation config: {0}")]
    InvalidSimulation(String),

    #[error("policy does not match model: {0}")]
    PolicyMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
