use alloc::string::String;

use crate::transport::{MessageKind, Participant};

/// Errors raised by the protocol engines and their building blocks.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("key length {0} bits is below the 128-bit minimum")]
    KeyTooShort(u32),
    #[error("invalid key material: {0}")]
    InvalidKey(&'static str),
    #[error("value {value} does not fit the plaintext space at exponent {exponent}")]
    EncodingOverflow { value: f64, exponent: u32 },
    #[error("non-finite value cannot be encoded")]
    NonFinite,
    #[error("plaintext mantissa is not below the modulus")]
    PlaintextOutOfRange,
    #[error("ciphertext exponents differ ({0} vs {1}); align first")]
    ExponentMismatch(u32, u32),
    #[error("ciphertext was produced under a different public key")]
    KeyMismatch,
    #[error("cannot average an empty list of ciphertexts")]
    EmptyAverage,
    #[error("averaging weights are invalid: {0}")]
    InvalidWeights(&'static str),

    #[error("shape mismatch: {what} (expected {expected}, got {got})")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("message kind {kind:?} is not allowed from {from} to {to}")]
    Whitelist {
        from: Participant,
        to: Participant,
        kind: MessageKind,
    },
    #[error("payload does not match the schema of {0:?}")]
    PayloadSchema(MessageKind),
    #[error("participant {0} is not registered on the bus")]
    UnknownParticipant(Participant),
    #[error("expected a {expected:?} message for {at}, none was delivered")]
    MissingMessage {
        at: Participant,
        expected: MessageKind,
    },

    #[error("series too short: need at least {needed} points, have {have}")]
    SeriesTooShort { needed: usize, have: usize },
    #[error("sample alignment mismatch: {0}")]
    Alignment(&'static str),
    #[error("mask for epoch {expected} requested but epoch {got} is retained")]
    MaskEpoch { expected: usize, got: usize },
    #[error("training diverged: parameter norm {0:e} exceeds the guard")]
    Diverged(f64),
    #[error("unknown split record id {0}")]
    UnknownRecord(u64),
    #[error("degenerate leaf denominator h + lambda = {0}")]
    DegenerateLeaf(f64),
}

pub type Result<T> = core::result::Result<T, Error>;
