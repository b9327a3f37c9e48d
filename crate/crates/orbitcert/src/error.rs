use thiserror::Error;

/// Errors surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("parse error at line {line}, column {col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },

    #[error("unknown name `{0}`")]
    UnknownName(String),

    #[error("parameter `{name}` value {value} outside declared range [{lo}, {hi}]")]
    OutOfRange {
        name: String,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("system has unbound parameters: {0}")]
    UnboundParameters(String),

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("equilibrium point: transversality undefined")]
    EquilibriumPoint,

    #[error("no return to section within time limit (not oscillating from this state?)")]
    NoReturn,

    #[error("trajectory diverged (|x| exceeded blow-up threshold)")]
    Divergent,

    #[error("step size underflow during integration (stiff system?)")]
    StepUnderflow,

    #[error("region too thin for rejection sampling (acceptance rate below 1e-4)")]
    RegionTooThin,

    #[error("empty grid: no points of the grid satisfy the region constraints")]
    EmptyGrid,

    #[error("theorem hypotheses not met: {0}")]
    HypothesisNotMet(String),

    #[error("certificate format mismatch: {0}")]
    CertificateMismatch(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
