//! Crate-wide error type.

use crate::catalog::ClassLabel;

/// Coarse error class, used by callers (the CLI in particular) that need to
/// map failures onto distinct exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Unreadable or malformed input: I/O, parse, schema, bad parameters.
    Data,
    /// Structurally inconsistent input: dangling ids, duplicate ids,
    /// out-of-bounds geometry, violated catalog rules.
    Integrity,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    ManifestParse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: schema violation: {msg}")]
    SchemaViolation {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: {msg}")]
    FileFormat { path: String, msg: String },
    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },
    #[error("{referrer} references missing {kind} `{id}`")]
    DanglingRef {
        kind: &'static str,
        id: String,
        referrer: String,
    },
    #[error("annotation `{id}`: center ({x}, {y}) lies outside patch `{patch_id}` ({w}x{h})")]
    CenterOutOfBounds {
        id: String,
        patch_id: String,
        x: i64,
        y: i64,
        w: u32,
        h: u32,
    },
    #[error("MF annotation `{annotation_id}` not allowed in negative-only dataset `{dataset_id}`")]
    MfInNegativeOnly {
        annotation_id: String,
        dataset_id: String,
    },
    #[error("patch `{id}` declares class {declared} but its annotations imply {derived}")]
    ClassLabelMismatch {
        id: String,
        declared: ClassLabel,
        derived: ClassLabel,
    },
    #[error("dataset `{id}` has no patches")]
    EmptyDataset { id: String },
    #[error("class {class} has no patches")]
    EmptyClass { class: ClassLabel },
    #[error("no weight provided for {what} `{id}`")]
    MissingWeight { what: &'static str, id: String },
    #[error("invalid weight {value} for {what} `{id}`")]
    InvalidWeight {
        what: &'static str,
        id: String,
        value: f64,
    },
    #[error("{what} weights must sum to 1, got {sum}")]
    UnnormalizedWeights { what: &'static str, sum: f64 },
    #[error("cannot draw {requested} from a population of {population} without replacement")]
    BatchTooLarge { requested: usize, population: usize },
    #[error("cannot split {slides} slides into {k} folds")]
    BadFoldCount { k: usize, slides: usize },
    #[error("fold {fold} out of range [0, {k})")]
    FoldOutOfRange { fold: usize, k: usize },
    #[error("detections span multiple patches: `{a}` vs `{b}`")]
    MixedPatchIds { a: String, b: String },
    #[error("confidence {value} outside [0, 1]")]
    BadConfidence { value: f64 },
    #[error("invalid parameter `{name}`: {msg}")]
    InvalidParam { name: &'static str, msg: String },
    #[error("tensor `{name}`: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("tensor `{name}` contains non-finite values")]
    NonFinite { name: String },
    #[error("snapshot at step {step} carries no validation loss")]
    MissingLoss { step: u64 },
    #[error("EMA tracker has no state yet; apply at least one update first")]
    EmptyTracker,
    #[error("no validation loss recorded; nothing to export")]
    NothingRecorded,
    #[error("unknown patch `{id}`")]
    UnknownPatch { id: String },
    #[error("unknown transform id `{id}`")]
    UnknownTransform { id: String },
    #[error("detections are still in `{transform_id}` coordinates; back-transform before fusing")]
    TransformedCoordinates { transform_id: String },
    #[error("detector `{model_id}` cannot evaluate view `{view}`")]
    ViewUnsupported { model_id: String, view: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Classify this error for exit-code mapping.
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::DuplicateId { .. }
            | Error::DanglingRef { .. }
            | Error::CenterOutOfBounds { .. }
            | Error::MfInNegativeOnly { .. }
            | Error::ClassLabelMismatch { .. }
            | Error::MixedPatchIds { .. }
            | Error::TransformedCoordinates { .. }
            | Error::UnknownPatch { .. } => ErrorClass::Integrity,
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
