use std::path::PathBuf;

use thiserror::Error;

use crate::tokenizer::TokenId;

pub type Result<T, E = BldError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BldError {
    #[error("vocabulary construction failed: {0}")]
    Construction(String),

    #[error("unknown token id {0}")]
    UnknownToken(TokenId),

    #[error("malformed {what} at line {line}: {reason}")]
    Parse {
        what: &'static str,
        line: usize,
        reason: String,
    },

    #[error("covering enumeration exceeded the cap of {cap} elements")]
    Feasibility { cap: usize },

    #[error("cannot condition on a byte prefix of zero probability (prefix length {prefix_len})")]
    Conditioning { prefix_len: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate lattice: all hypotheses have zero mass after consuming {consumed} bytes")]
    DegenerateLattice { consumed: usize },

    #[error("byte 0x{byte:02x} at position {position} is unreachable from every hypothesis")]
    Advance { byte: u8, position: usize },

    #[error("distribution is not normalized (sum {sum})")]
    NotNormalized { sum: f64 },

    #[error("input of length {len} exceeds the maximum sequence length {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite loss for batch element {index}")]
    NonFiniteLoss { index: usize },

    #[error("non-finite value in {term} at token {position}, byte slot {slot}")]
    NonFiniteTerm {
        term: &'static str,
        position: usize,
        slot: usize,
    },

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("no byte conditional available for context of length {context_len}")]
    MissingConditional { context_len: usize },

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported format version {found} in {path} (supported: {supported})")]
    UnsupportedVersion {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("vocabulary fingerprint mismatch in {path}")]
    FingerprintMismatch { path: PathBuf },

    #[error("truncated file {path}: unexpected end of data at offset {offset}")]
    Truncated { path: PathBuf, offset: u64 },

    #[error("corpus {0} contains no samples")]
    EmptyCorpus(PathBuf),

    #[error("beam failed at byte position {position}: {source}")]
    TargetConstruction {
        position: usize,
        #[source]
        source: Box<BldError>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl BldError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BldError::Io {
            path: path.into(),
            source,
        }
    }
}
