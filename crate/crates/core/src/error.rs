use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: expected {expected}, got {got:?}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("degenerate mixture: overall variance is zero")]
    DegenerateMixture,

    #[error("invalid region: {0}")]
    InvalidRegion(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("site {site} uses {kind}, expected {expected}")]
    WrongNormKind {
        site: usize,
        kind: &'static str,
        expected: &'static str,
    },

    #[error("{what} out of range: {index} (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),

    #[error("no pixel-instance normalization sites in generator")]
    NoPinSites,

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl Into<String>, got: &[usize]) -> Self {
        Error::Dimension {
            op,
            expected: expected.into(),
            got: got.to_vec(),
        }
    }
}
