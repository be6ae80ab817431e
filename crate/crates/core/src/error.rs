use std::io;

use crate::model::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad tensor magic {0:?}, expected \"EBT1\"")]
    BadMagic([u8; 4]),

    #[error("truncated tensor file: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    #[error("tensor file has {0} trailing bytes")]
    TrailingBytes(usize),

    #[error("tensor rank {0} exceeds the maximum of 4")]
    RankTooLarge(usize),

    #[error("invalid tensor shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: &'static str },

    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("missing weight tensor {0:?}")]
    MissingWeight(String),

    #[error("duplicate layer name {0:?}")]
    DuplicateLayerName(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("model violates excitation backprop assumptions: {}", format_violations(.0))]
    EbAssumptions(Vec<Violation>),

    #[error("invalid prior: {0}")]
    InvalidPrior(String),

    #[error("invalid time step {step}, expected 1..={max}")]
    InvalidStep { step: usize, max: usize },

    #[error("cannot normalize: total mass is zero")]
    AllZeroMass,

    #[error("invalid mode: {0}")]
    InvalidMode(String),

    #[error("invalid target layer {0:?}")]
    InvalidLayer(String),

    #[error("invalid window length {length} for a sequence of {total}")]
    InvalidLength { length: usize, total: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}
