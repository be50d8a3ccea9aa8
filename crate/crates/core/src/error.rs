use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("box of dimension {dimension} and radius {radius} has too many sites: {reason}")]
    BoxTooLarge {
        dimension: usize,
        radius: i64,
        reason: String,
    },

    #[error("site {site:?} lies outside the box [-{radius},{radius}]^{dimension}")]
    OutsideBox {
        site: Vec<i64>,
        radius: i64,
        dimension: usize,
    },

    #[error("enumeration over {sites} relevant sites exceeds the guard of {guard} sites (raise the guard to override)")]
    GuardExceeded { sites: usize, guard: usize },

    #[error("environment carries no coupling uniforms")]
    MissingUniforms,

    #[error("solver did not converge within {iterations} sweeps (last residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("underflow: {0}")]
    Underflow(String),

    #[error("return weight at {site:?} is within tolerance of 1 (near-recurrent box), psi is numerically singular")]
    NearRecurrence { site: Vec<i64> },

    #[error("no walk hit the target in {replicates} replicates; raise the budget or shrink the box")]
    NoHits { replicates: usize },

    #[error("sampled objective is not concave beyond noise at lambda = ({0}, {1}, {2}) with values ({3}, {4}, {5})")]
    NonConcave(f64, f64, f64, f64, f64, f64),

    #[error("replicate {index} (stream seed {stream_seed}) failed: {source}")]
    ReplicateFailed {
        index: usize,
        stream_seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad user input, as opposed to numerical failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_)
                | Error::BoxTooLarge { .. }
                | Error::OutsideBox { .. }
                | Error::GuardExceeded { .. }
                | Error::MissingUniforms
                | Error::Parse(_)
        )
    }

    /// Short machine-readable tag used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Invalid(_) => "invalid",
            Error::BoxTooLarge { .. } => "box_too_large",
            Error::OutsideBox { .. } => "outside_box",
            Error::GuardExceeded { .. } => "guard_exceeded",
            Error::MissingUniforms => "missing_uniforms",
            Error::NonConvergence { .. } => "non_convergence",
            Error::Underflow(_) => "underflow",
            Error::NearRecurrence { .. } => "near_recurrence",
            Error::NoHits { .. } => "no_hits",
            Error::NonConcave(..) => "non_concave",
            Error::ReplicateFailed { .. } => "replicate_failed",
            Error::Checkpoint(_) => "checkpoint",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
        }
    }
}

