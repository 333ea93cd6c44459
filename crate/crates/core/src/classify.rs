//! Region-of-interest extraction and KL-grade probability backends.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detect::{KneeSlot, Point};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::ingest::NormalizedImage;
use crate::process::{ExternalProcess, PatchRequest};
use crate::NUM_GRADES;

/// Side of the native-scale patch cut around each joint.
pub const ROI_SIZE: usize = 672;
/// Side of the classifier input.
pub const CLASSIFIER_INPUT_SIZE: usize = 256;
/// Joint position inside the patch (both axes).
pub const ROI_CENTER: usize = ROI_SIZE / 2;

#[derive(Debug, Clone, PartialEq)]
pub struct RoiPatch {
    pub pixels_full: Grid<f32>,
    pub pixels_scaled: Grid<f32>,
    pub joint_center_in_patch: (usize, usize),
    /// Fraction of `pixels_full` that fell outside the source image.
    pub pad_fraction: f64,
    /// Image coordinates of the patch's top-left pixel.
    pub origin: (i64, i64),
}

impl RoiPatch {
    /// Builds a patch from a full-resolution grid; the scaled copy is derived.
    pub fn from_full(pixels_full: Grid<f32>, origin: (i64, i64), pad_fraction: f64) -> Self {
        assert_eq!(pixels_full.width(), ROI_SIZE);
        assert_eq!(pixels_full.height(), ROI_SIZE);
        let pixels_scaled =
            area_downsample(&pixels_full, CLASSIFIER_INPUT_SIZE, CLASSIFIER_INPUT_SIZE);
        Self {
            pixels_full,
            pixels_scaled,
            joint_center_in_patch: (ROI_CENTER, ROI_CENTER),
            pad_fraction,
            origin,
        }
    }

    /// Same geometry with new pixel content.
    pub fn with_full(&self, pixels_full: Grid<f32>) -> Self {
        Self::from_full(pixels_full, self.origin, self.pad_fraction)
    }
}

/// Cuts the 672×672 window centered at the (rounded) joint center.
///
/// Pixels outside the image are zero and counted in `pad_fraction`.
pub fn extract_roi(img: &NormalizedImage, center: Point) -> Result<RoiPatch> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if !(center.x >= 0.0 && center.y >= 0.0 && center.x < w && center.y < h) {
        return Err(Error::CenterOutsideImage {
            x: center.x,
            y: center.y,
        });
    }
    let cx = (center.x.round() as i64).min(img.width() as i64 - 1);
    let cy = (center.y.round() as i64).min(img.height() as i64 - 1);
    let origin = (cx - ROI_CENTER as i64, cy - ROI_CENTER as i64);
    let src = img.pixels();
    let mut padded = 0usize;
    let full = Grid::from_fn(ROI_SIZE, ROI_SIZE, |x, y| {
        match src.get_signed(origin.0 + x as i64, origin.1 + y as i64) {
            Some(v) => v,
            None => {
                padded += 1;
                0.0
            }
        }
    });
    let pad_fraction = padded as f64 / (ROI_SIZE * ROI_SIZE) as f64;
    Ok(RoiPatch::from_full(full, origin, pad_fraction))
}

/// Per-output-index source spans with fractional coverage weights.
fn area_weights(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let start = o as f64 * scale;
            let end = start + scale;
            let mut spans = Vec::new();
            let mut i = start.floor() as usize;
            while (i as f64) < end && i < in_len {
                let overlap = end.min(i as f64 + 1.0) - start.max(i as f64);
                if overlap > 0.0 {
                    spans.push((i, overlap / scale));
                }
                i += 1;
            }
            spans
        })
        .collect()
}

/// Box-filter downsampling weighting each source pixel by covered area.
pub fn area_downsample(src: &Grid<f32>, out_w: usize, out_h: usize) -> Grid<f32> {
    let cols = area_weights(src.width(), out_w);
    let rows = area_weights(src.height(), out_h);
    let mut horiz = vec![0f64; src.height() * out_w];
    for y in 0..src.height() {
        let row = src.row(y);
        for (x, spans) in cols.iter().enumerate() {
            horiz[y * out_w + x] = spans.iter().map(|&(i, wt)| wt * f64::from(row[i])).sum();
        }
    }
    Grid::from_fn(out_w, out_h, |x, y| {
        rows[y]
            .iter()
            .map(|&(i, wt)| wt * horiz[i * out_w + x])
            .sum::<f64>() as f32
    })
}

/// Probabilities of KL grades 0..=4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbabilityVector([f64; NUM_GRADES]);

impl ProbabilityVector {
    pub const TOLERANCE: f64 = 1e-6;

    /// Strict constructor: entries non-negative and summing to one.
    pub fn new(p: [f64; NUM_GRADES]) -> Result<Self> {
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidProbabilities(format!("{p:?}")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::InvalidProbabilities(format!("{p:?} sums to {sum}")));
        }
        Ok(Self(p))
    }

    /// Divides non-negative finite scores by their sum.
    pub fn normalized(raw: &[f64]) -> Result<Self> {
        if raw.len() != NUM_GRADES {
            return Err(Error::InvalidProbabilities(format!(
                "expected {NUM_GRADES} values, got {}",
                raw.len()
            )));
        }
        if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidProbabilities(format!("{raw:?}")));
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidProbabilities("all-zero vector".into()));
        }
        let mut p = [0.0; NUM_GRADES];
        for (dst, v) in p.iter_mut().zip(raw) {
            *dst = v / sum;
        }
        Ok(Self(p))
    }

    pub fn uniform() -> Self {
        Self([1.0 / NUM_GRADES as f64; NUM_GRADES])
    }

    pub fn values(&self) -> &[f64; NUM_GRADES] {
        &self.0
    }

    /// Most probable grade; ties resolve to the lower grade.
    pub fn argmax(&self) -> u8 {
        let mut best = 0;
        for k in 1..NUM_GRADES {
            if self.0[k] > self.0[best] {
                best = k;
            }
        }
        best as u8
    }
}

impl TryFrom<Vec<f64>> for ProbabilityVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::normalized(&v)
    }
}

impl From<ProbabilityVector> for Vec<f64> {
    fn from(p: ProbabilityVector) -> Self {
        p.0.to_vec()
    }
}

/// Source of per-knee KL probability scores. Scores need not be normalized.
pub trait ClassifierBackend: Send + Sync {
    fn id(&self) -> String;
    fn raw_scores(&self, roi: &RoiPatch, source_id: &str, knee: KneeSlot) -> Result<Vec<f64>>;
}

/// Validated, normalized probabilities from `backend`.
pub fn classify(
    backend: &dyn ClassifierBackend,
    roi: &RoiPatch,
    source_id: &str,
    knee: KneeSlot,
) -> Result<ProbabilityVector> {
    ProbabilityVector::normalized(&backend.raw_scores(roi, source_id, knee)?)
}

/// Returns the same vector for every knee.
#[derive(Debug, Clone)]
pub struct ConstantClassifier(pub [f64; NUM_GRADES]);

impl ConstantClassifier {
    pub fn uniform() -> Self {
        Self([1.0; NUM_GRADES])
    }
}

impl ClassifierBackend for ConstantClassifier {
    fn id(&self) -> String {
        format!("constant:{:?}", self.0)
    }

    fn raw_scores(&self, _: &RoiPatch, _: &str, _: KneeSlot) -> Result<Vec<f64>> {
        Ok(self.0.to_vec())
    }
}

/// Classifier-results document: source id → knee slot → five scores.
pub type ClassifierDocument = BTreeMap<String, BTreeMap<KneeSlot, Vec<f64>>>;

/// Lookup of precomputed scores by `(source_id, knee_side)`.
#[derive(Debug, Clone)]
pub struct FileClassifier {
    doc: ClassifierDocument,
    label: String,
}

impl FileClassifier {
    pub fn new(doc: ClassifierDocument, label: impl Into<String>) -> Self {
        Self {
            doc,
            label: label.into(),
        }
    }

    pub fn from_json(text: &str, label: impl Into<String>) -> Result<Self> {
        Ok(Self::new(serde_json::from_str(text)?, label))
    }
}

impl ClassifierBackend for FileClassifier {
    fn id(&self) -> String {
        format!("file:{}", self.label)
    }

    fn raw_scores(&self, _: &RoiPatch, source_id: &str, knee: KneeSlot) -> Result<Vec<f64>> {
        self.doc
            .get(source_id)
            .and_then(|m| m.get(&knee))
            .cloned()
            .ok_or_else(|| Error::LookupMiss {
                source_id: source_id.to_string(),
                knee_side: knee.to_string(),
            })
    }
}

/// Streams the 256×256 patch to a child process and reads five reals back.
pub struct ExternalClassifier(ExternalProcess);

impl ExternalClassifier {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        ExternalProcess::spawn(program, args).map(Self)
    }
}

impl ClassifierBackend for ExternalClassifier {
    fn id(&self) -> String {
        format!("process:{}", self.0.describe())
    }

    fn raw_scores(&self, roi: &RoiPatch, source_id: &str, knee: KneeSlot) -> Result<Vec<f64>> {
        let reply = self
            .0
            .request(&PatchRequest::new(source_id, knee.as_str(), &roi.pixels_scaled))?;
        parse_reals(&reply)
    }
}

/// Parses whitespace-, comma- or JSON-array-delimited reals.
pub fn parse_reals(line: &str) -> Result<Vec<f64>> {
    line.split(|c: char| c == ',' || c == '[' || c == ']' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::Backend(format!("non-numeric reply token `{t}`")))
        })
        .collect()
}
