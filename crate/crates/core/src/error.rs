// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NapError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NapError {
    #[error("incompatible pattern lengths: expected {expected} bits, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("query {index}: expected {expected} bits, found {found}")]
    QueryLength {
        index: usize,
        expected: usize,
        found: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite activation in layer `{layer}`, sample {sample}, position {position}")]
    NonFinite {
        layer: String,
        sample: usize,
        position: usize,
    },

    #[error("layer `{layer}`: calibration missing (per-position thresholds not fitted)")]
    CalibrationMissing { layer: String },

    #[error("layer `{layer}`: expected {expected} values, found {found}")]
    ShapeMismatch {
        layer: String,
        expected: usize,
        found: usize,
    },

    #[error("layer `{0}` not found")]
    LayerMissing(String),

    #[error("leave-one-out undefined for a store holding a single sample")]
    LeaveOneOutUndefined,

    #[error("pattern index {index} out of range for store of {len} patterns")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("majority vote requires odd k, got {0}")]
    EvenMajority(usize),

    #[error("requested {requested} layers, only {available} available")]
    TooFewLayers { requested: usize, available: usize },

    #[error("both classes must be present")]
    SingleClass,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("layer schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("layer `{layer}`: data file holds {found} bytes, manifest requires {expected}")]
    DumpSizeMismatch { layer: String, expected: u64, found: u64 },

    #[error("layer `{layer}`: data file truncated ({found} bytes is not a whole number of {record}-byte samples)")]
    DumpTruncated { layer: String, found: u64, record: u64 },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("bad magic: not a NAPS pattern store")]
    BadMagic,

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("monitor references missing store file {0}")]
    DanglingStore(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed document: {0}")]
    Json(#[from] serde_json::Error),
}
