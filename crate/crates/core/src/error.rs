use std::fmt;

use thiserror::Error;

/// A DICOM (group, element) tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tag(pub u16, pub u16);

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:04X},{:04X})", self.0, self.1)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    // ingest
    #[error("unsupported transfer syntax: {0}")]
    UnsupportedTransferSyntax(String),
    #[error("missing required tag {0}")]
    MissingRequiredTag(Tag),
    #[error("malformed element at byte {offset}: {reason}")]
    MalformedElement { offset: usize, reason: String },
    #[error("unsupported pixel format: {0}")]
    UnsupportedPixelFormat(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("sidecar is missing field `{0}`")]
    MissingSidecarField(&'static str),
    #[error("image is not single-channel grayscale")]
    NotGrayscale,
    #[error("image decode failed: {0}")]
    Decode(String),
    #[error("resampled image would be {width}x{height}, below the 64 px minimum")]
    ResampleTooSmall { width: usize, height: usize },

    // detect
    #[error("no detection candidates")]
    EmptyCandidates,
    #[error("unknown source id `{0}`")]
    UnknownSource(String),
    #[error("malformed detection record: {0}")]
    MalformedRecord(String),

    // classify / segment backends
    #[error("joint center ({x}, {y}) lies outside the image")]
    CenterOutsideImage { x: f64, y: f64 },
    #[error("no backend entry for source `{source_id}`, knee `{knee_side}`")]
    LookupMiss { source_id: String, knee_side: String },
    #[error("invalid probability vector: {0}")]
    InvalidProbabilities(String),
    #[error("backend failure: {0}")]
    Backend(String),

    // segment
    #[error("sharpening ratio {0} outside [0, 1]")]
    InvalidRatio(f64),
    #[error("{0} mask is empty after cleaning")]
    EmptyMask(&'static str),
    #[error("lower bone centroid is not below the upper bone centroid")]
    CentroidOrder,
    #[error("mask size mismatch: {0}")]
    MaskShape(String),

    // jsd
    #[error("no upper-bone pixels in the {0} half of the patch")]
    NoUpperPixels(&'static str),
    #[error("only {count} valid measurement lines on the {side} side (need at least 5)")]
    TooFewLines { side: &'static str, count: usize },
    #[error("laterality is unknown for a single-knee image")]
    UnknownLaterality,
    #[error("need at least {needed} distinct values, found {found}")]
    InsufficientDistinct { needed: usize, found: usize },
    #[error("negative joint-space distance {0}")]
    NegativeDistance(f64),
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),

    // fuse
    #[error("invalid feature vector: {0}")]
    InvalidFeatures(String),
    #[error("invalid training set: {0}")]
    Dataset(String),
    #[error("invalid forest parameters: {0}")]
    InvalidParams(String),
    #[error("model has no trees")]
    UntrainedModel,
    #[error("model document: {0}")]
    ModelFormat(String),
    #[error("unsupported model version {0}")]
    VersionMismatch(u64),

    // eval
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("grade {0} outside 0..=4")]
    GradeOutOfRange(i64),
    #[error("case sets differ: {0}")]
    CaseSetMismatch(String),

    // phantom
    #[error("invalid phantom spec: {0}")]
    InvalidPhantom(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
