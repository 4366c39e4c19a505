use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("cycle detected among nodes {0:?}")]
    CycleDetected(Vec<String>),
    #[error("duplicate node name `{0}`")]
    DuplicateName(String),
    #[error("self loop on node `{0}`")]
    SelfLoop(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("node index {index} out of range for {len} nodes")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid DAG: {0}")]
    InvalidDag(String),

    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: i64, n_classes: usize },
    #[error("invalid dequantization variance {0}")]
    InvalidVariance(f64),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFiniteValue(&'static str),
    #[error("failed to bracket root for node `{node}`")]
    BracketingFailed { node: String },
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("loss diverged at epoch {epoch}")]
    DivergedLoss { epoch: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("singular design matrix in {0}")]
    SingularDesign(&'static str),
    #[error("empty stratum a1={a1}, a2={a2}")]
    EmptyStratum { a1: u8, a2: u8 },
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),

    #[error("invalid intervention: {0}")]
    InvalidIntervention(String),

    #[error("joint state space of {0} configurations is too large")]
    StateSpaceTooLarge(u128),
    #[error("invalid conditional table for `{node}`: {reason}")]
    InvalidTable { node: String, reason: String },

    #[error("noise sidecar missing: {0}")]
    MissingSidecar(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteValue(_)
                | Error::BracketingFailed { .. }
                | Error::DivergedLoss { .. }
                | Error::SingularDesign(_)
                | Error::EmptyStratum { .. }
                | Error::StateSpaceTooLarge(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
