use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors produced anywhere in the toolkit.
///
/// Variants are grouped so the CLI can map them onto exit codes:
/// configuration problems, data problems, and numerical degeneracy.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("rank {rank} exceeds min({rows}, {cols})")]
    RankTooLarge {
        rank: usize,
        rows: usize,
        cols: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("time step {t} outside 1..={horizon}")]
    StepOutOfRange { t: usize, horizon: usize },

    #[error("rank-deficient Gram matrix: smallest eigenvalue {smallest:e} below floor {floor:e}")]
    RankDeficient { smallest: f64, floor: f64 },

    #[error("arm {0} has no observations; forced sampling too short")]
    NoObservations(usize),

    #[error("no phase-2 steps have been accumulated")]
    NoPhase2Steps,

    #[error("ill-posed linear form: standard error is zero (estimate {estimate})")]
    IllPosed { estimate: f64 },

    #[error("invalid step record: {0}")]
    InvalidRecord(String),

    #[error("{path}: line {line}: {reason}")]
    Malformed {
        path: String,
        line: u64,
        reason: String,
    },

    #[error("missing column `{0}` in log header")]
    MissingColumn(String),

    #[error("numerical degeneracy: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse classification used for process exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_)
            | Error::Dimension(_)
            | Error::RankTooLarge { .. }
            | Error::StepOutOfRange { .. }
            | Error::InvalidRecord(_) => ErrorKind::Config,
            Error::NonFinite(_)
            | Error::NoObservations(_)
            | Error::NoPhase2Steps
            | Error::Malformed { .. }
            | Error::MissingColumn(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => ErrorKind::Data,
            Error::RankDeficient { .. } | Error::IllPosed { .. } | Error::Numerical(_) => {
                ErrorKind::Numerical
            }
        }
    }
}
