use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report. The variant name is what the CLI
/// prints on a numerical failure, so keep them stable.
#[derive(Debug, Error)]
pub enum Error {
    #[error("RankDeficient: estimated rank {rank} < {cols} columns{}", fmt_names(.names))]
    RankDeficient {
        rank: usize,
        cols: usize,
        names: Vec<String>,
    },
    #[error("SolveFailed: {0}")]
    SolveFailed(String),
    #[error("EigFailed: no convergence after {iterations} iterations")]
    EigFailed { iterations: usize },
    #[error("DimensionMismatch: {0}")]
    DimensionMismatch(String),
    #[error("NonFiniteState: state became non-finite at step {step}")]
    NonFiniteState { step: usize },
    #[error("StochasticSystem: {0} needs a noise source; use a sampler")]
    StochasticSystem(String),
    #[error("InvalidRegion: {0}")]
    InvalidRegion(String),
    #[error("InvalidSystem: {0}")]
    InvalidSystem(String),
    #[error("TrajectoryTooShort: need {needed} states, have {available}")]
    TrajectoryTooShort { needed: usize, available: usize },
    #[error("RequiresTrajectory: dictionary '{0}' can only be evaluated on a trajectory")]
    RequiresTrajectory(String),
    #[error("UnknownObservable: {0}")]
    UnknownObservable(String),
    #[error("InvalidSplit: split {split} not in [1, {n})")]
    InvalidSplit { split: usize, n: usize },
    #[error("InvalidPermutation: {0}")]
    InvalidPermutation(String),
    #[error("InvalidProbability: rho = {0} must lie in (0, 1/2)")]
    InvalidProbability(f64),
    #[error("InvalidParameter: {0}")]
    InvalidParameter(String),
    #[error("EmptyChain: every row of |K^T| is zero")]
    EmptyChain,
    #[error("DegenerateRow: top-block row '{0}' has all of its mass in the complement block")]
    DegenerateRow(String),
    #[error("InvalidSeedSet: {0}")]
    InvalidSeedSet(String),
    #[error("SeedDropped: seed observable '{0}' was discarded as a zero row")]
    SeedDropped(String),
    #[error("PreconditionUnsatisfiable: {0}")]
    PreconditionUnsatisfiable(String),
    /// A failure inside one experiment replicate.
    #[error("replicate seed {seed}: {source}")]
    Replicate { seed: u64, source: Box<Error> },
    #[error("Config: {0}")]
    Config(String),
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
    #[error("Json: {0}")]
    Json(#[from] serde_json::Error),
}

fn fmt_names(names: &[String]) -> String {
    if names.is_empty() {
        String::new()
    } else {
        format!(" (dictionary: {})", names.join(", "))
    }
}

impl Error {
    /// Short variant name, used in CLI diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::RankDeficient { .. } => "RankDeficient",
            Error::SolveFailed(_) => "SolveFailed",
            Error::EigFailed { .. } => "EigFailed",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::NonFiniteState { .. } => "NonFiniteState",
            Error::StochasticSystem(_) => "StochasticSystem",
            Error::InvalidRegion(_) => "InvalidRegion",
            Error::InvalidSystem(_) => "InvalidSystem",
            Error::TrajectoryTooShort { .. } => "TrajectoryTooShort",
            Error::RequiresTrajectory(_) => "RequiresTrajectory",
            Error::UnknownObservable(_) => "UnknownObservable",
            Error::InvalidSplit { .. } => "InvalidSplit",
            Error::InvalidPermutation(_) => "InvalidPermutation",
            Error::InvalidProbability(_) => "InvalidProbability",
            Error::InvalidParameter(_) => "InvalidParameter",
            Error::EmptyChain => "EmptyChain",
            Error::DegenerateRow(_) => "DegenerateRow",
            Error::InvalidSeedSet(_) => "InvalidSeedSet",
            Error::SeedDropped(_) => "SeedDropped",
            Error::PreconditionUnsatisfiable(_) => "PreconditionUnsatisfiable",
            Error::Replicate { source, .. } => source.kind(),
            Error::Config(_) => "Config",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }

    /// Errors caused by bad input rather than by the numerics.
    pub fn is_usage(&self) -> bool {
        if let Error::Replicate { source, .. } = self {
            return source.is_usage();
        }
        matches!(
            self,
            Error::Config(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::UnknownObservable(_)
                | Error::InvalidParameter(_)
        )
    }
}
