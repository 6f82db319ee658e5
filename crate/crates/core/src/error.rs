use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("simulation blew up at step {step}: |x| = {magnitude:e}")]
    SimulationBlowup { step: usize, magnitude: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("requested rank {requested} exceeds dimension {dimension}")]
    InvalidRank { requested: usize, dimension: usize },

    #[error("degenerate reservoir: {0}")]
    DegenerateReservoir(String),

    #[error("readout system is rank deficient: {deficient} of {dimension} directions are singular")]
    RankDeficient { deficient: usize, dimension: usize },

    #[error("training diverged: {0}")]
    TrainingDivergence(String),

    #[error("closed-loop trajectory diverged at step {step} after {} convergence checks", history.len())]
    SurrogateDiverged {
        step: usize,
        history: Vec<Vec<f64>>,
    },

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("invalid normalization: component {0} has zero standard deviation")]
    InvalidNormalization(usize),

    #[error("invalid decomposition: {0}")]
    InvalidDecomposition(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("group {group}: {source}")]
    Member {
        group: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("inconsistent file contents: {0}")]
    Inconsistent(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn mismatch(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context,
            expected,
            actual,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_group(self, group: usize) -> Self {
        Error::Member {
            group,
            source: Box::new(self),
        }
    }

    /// True for errors caused by user-provided configuration rather than runtime failure.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::InvalidConfig(_) | Error::InvalidArgument(_) | Error::InvalidRank { .. } => true,
            Error::InvalidDecomposition(_) | Error::InvalidDimension(_) => true,
            Error::Stage { source, .. } | Error::Member { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}
