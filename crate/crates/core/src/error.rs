use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid ring parameters: {0}")]
    InvalidParams(&'static str),
    #[error("ring parameter mismatch (n={left_n}, q={left_q} vs n={right_n}, q={right_q})")]
    ParamMismatch {
        left_n: usize,
        left_q: u64,
        right_n: usize,
        right_q: u64,
    },
    #[error("operands are in different domains")]
    DomainMismatch,
    #[error("expected a coefficient-domain element")]
    NotCoefficientDomain,
    #[error("standard deviation must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    #[error("vector of length {len} exceeds {slots} slots")]
    VectorTooLong { len: usize, slots: usize },
    #[error("value {value} at slot {slot} overflows the plaintext modulus at this scale")]
    EncodingOverflow { slot: usize, value: f64 },
    #[error("non-finite value at slot {0}")]
    NonFinite(usize),
    #[error("invalid encoding parameters: {0}")]
    InvalidEncoding(&'static str),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("at least {min} public key shares are required, got {got}")]
    TooFewKeyShares { min: usize, got: usize },
    #[error("duplicate device id {0}")]
    DuplicateDevice(u32),
    #[error("mixed-key aggregation: ciphertexts were encrypted under different keys")]
    MixedKeyAggregation,
    #[error("device {0} is not a contributor of the aggregated key")]
    NotAContributor(u32),
    #[error("incomplete decryption quorum: missing shares from devices {missing:?}")]
    IncompleteQuorum { missing: Vec<u32> },
    #[error("share from device {0} does not belong to this quorum")]
    UnexpectedShare(u32),
    #[error("fingerprint mismatch: {0}")]
    FingerprintMismatch(&'static str),
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged (non-finite loss)")]
    TrainingDivergence,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed encoding: {0}")]
    Malformed(&'static str),
}
