//! Knee osteoarthritis grading from posterior-anterior knee radiographs.
//!
//! The pipeline stages are:
//!
//! 1. **Ingest** – DICOM / portable graymap parsing, bicubic resampling to
//!    0.2 mm/pixel, 8-bit reduction and unit-scale normalization.
//! 2. **Detect** – top-two confidence selection of knee-joint candidates.
//! 3. **Classify** – 672×672 region of interest, 256×256 classifier input,
//!    five-grade Kellgren-Lawrence probabilities from a pluggable backend.
//! 4. **Segment / JSD** – gamma and Laplacian enhancement, femur and
//!    tibia+fibula masks, medial and lateral joint-space distances and JSN grades.
//! 5. **Fuse** – random-forest committee over the 7-element feature vector.
//!
//! [`eval`] implements the evaluation metrics and [`phantom`] generates
//! synthetic radiographs with exact ground truth.

pub mod classify;
pub mod detect;
pub mod error;
pub mod eval;
pub mod fuse;
pub mod grid;
pub mod ingest;
pub mod jsd;
pub mod overlay;
pub mod phantom;
pub mod pipeline;
pub mod process;
pub mod segment;

pub use classify::{ProbabilityVector, RoiPatch};
pub use detect::{BoundingBox, JointDetection, KneePair, Point};
pub use error::{Error, Result, Tag};
pub use fuse::{FeatureVector, ForestParams, KlAssessment, RandomForestModel};
pub use grid::Grid;
pub use ingest::{Laterality, NormalizedImage, PixelSpacing, RawRadiograph};
pub use jsd::{JsdMeasurement, JsnGrades, ThresholdSet};
pub use segment::{BoneMaskPair, Mask};

/// Number of Kellgren-Lawrence grades (0..=4).
pub const NUM_GRADES: usize = 5;

/// Crate version embedded in reports and model documents.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
