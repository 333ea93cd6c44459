//! Knee-joint candidate postprocessing and detection metrics.
//!
//! Detector backends produce any number of candidate boxes. No confidence
//! threshold is applied: the two most confident candidates are kept as the
//! two knees, ordered left to right in the image.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Laterality, NormalizedImage};

/// Half side of the box synthesized around a center-only detection.
pub const DEFAULT_BOX_HALF_SIDE: f64 = 250.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned box `(x0, y0)`–`(x1, y1)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        if !(x0 < x1 && y0 < y1) {
            return Err(Error::MalformedRecord(format!(
                "box ({x0}, {y0}, {x1}, {y1}) is empty or inverted"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn around(center: Point, half_side: f64) -> Self {
        Self {
            x0: center.x - half_side,
            y0: center.y - half_side,
            x1: center.x + half_side,
            y1: center.y + half_side,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, p: Point) -> bool {
        self.x0 <= p.x && p.x <= self.x1 && self.y0 <= p.y && p.y <= self.y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointDetection {
    pub center: Point,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
}

impl JointDetection {
    pub fn new(center: Point, bbox: BoundingBox, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::MalformedRecord(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        if !bbox.contains(center) {
            return Err(Error::MalformedRecord("center lies outside its box".into()));
        }
        Ok(Self {
            center,
            bbox,
            confidence,
        })
    }

    /// Detection with the default 500×500 box.
    pub fn centered(center: Point, confidence: f64) -> Result<Self> {
        Self::new(center, BoundingBox::around(center, DEFAULT_BOX_HALF_SIDE), confidence)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KneePair {
    pub image_left: JointDetection,
    pub image_right: Option<JointDetection>,
    pub single_knee_flag: bool,
}

impl KneePair {
    /// The selected knees with their slot names, left slot first.
    pub fn knees(&self) -> Vec<(KneeSlot, JointDetection)> {
        let mut out = vec![(KneeSlot::Left, self.image_left)];
        if let Some(r) = self.image_right {
            out.push((KneeSlot::Right, r));
        }
        out
    }
}

/// Which slot of a [`KneePair`] a knee occupies; used as the backend lookup key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KneeSlot {
    Left,
    Right,
}

impl KneeSlot {
    pub fn as_str(&self) -> &'static str {
        match self {
            KneeSlot::Left => "left",
            KneeSlot::Right => "right",
        }
    }
}

impl std::fmt::Display for KneeSlot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Total order used for ranking: confidence descending, then center x, then
/// center y, then box coordinates ascending.
fn rank_order(a: &JointDetection, b: &JointDetection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.center.x.total_cmp(&b.center.x))
        .then(a.center.y.total_cmp(&b.center.y))
        .then(a.bbox.x0.total_cmp(&b.bbox.x0))
        .then(a.bbox.y0.total_cmp(&b.bbox.y0))
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
}

/// Keeps the two highest-confidence candidates, ordered by center x.
pub fn select_knees(candidates: &[JointDetection]) -> Result<KneePair> {
    let mut ranked: Vec<JointDetection> = candidates.to_vec();
    ranked.sort_by(rank_order);
    match ranked.as_slice() {
        [] => Err(Error::EmptyCandidates),
        [only] => Ok(KneePair {
            image_left: *only,
            image_right: None,
            single_knee_flag: true,
        }),
        [a, b, ..] => {
            let (left, right) = if (b.center.x, b.center.y) < (a.center.x, a.center.y) {
                (*b, *a)
            } else {
                (*a, *b)
            };
            Ok(KneePair {
                image_left: left,
                image_right: Some(right),
                single_knee_flag: false,
            })
        }
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Euclidean distance between predicted and labeled centers (C_d), in pixels.
pub fn center_deviation(pred: Point, label: Point) -> f64 {
    (pred.x - label.x).hypot(pred.y - label.y)
}

/// One detector output row in a detection-results document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub center_x: f64,
    pub center_y: f64,
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y1: Option<f64>,
}

impl CandidateRecord {
    pub fn from_detection(d: &JointDetection, with_box: bool) -> Self {
        Self {
            center_x: d.center.x,
            center_y: d.center.y,
            confidence: Some(d.confidence),
            x0: with_box.then_some(d.bbox.x0),
            y0: with_box.then_some(d.bbox.y0),
            x1: with_box.then_some(d.bbox.x1),
            y1: with_box.then_some(d.bbox.y1),
        }
    }

    fn to_detection(&self) -> Result<JointDetection> {
        let center = Point::new(self.center_x, self.center_y);
        let confidence = self
            .confidence
            .ok_or_else(|| Error::MalformedRecord("missing confidence".into()))?;
        match (self.x0, self.y0, self.x1, self.y1) {
            (None, None, None, None) => JointDetection::centered(center, confidence),
            (Some(x0), Some(y0), Some(x1), Some(y1)) => {
                JointDetection::new(center, BoundingBox::new(x0, y0, x1, y1)?, confidence)
            }
            _ => Err(Error::MalformedRecord("partial box coordinates".into())),
        }
    }
}

/// Detection-results document: source id → candidate records.
pub type DetectionDocument = BTreeMap<String, Vec<CandidateRecord>>;

pub fn parse_detection_document(text: &str) -> Result<DetectionDocument> {
    serde_json::from_str(text).map_err(|e| Error::MalformedRecord(e.to_string()))
}

/// Candidates recorded for `source_id`; a 500×500 box is synthesized when absent.
pub fn load_candidates(doc: &DetectionDocument, source_id: &str) -> Result<Vec<JointDetection>> {
    doc.get(source_id)
        .ok_or_else(|| Error::UnknownSource(source_id.to_string()))?
        .iter()
        .map(CandidateRecord::to_detection)
        .collect()
}

const CONFIDENCE_FLOOR: f64 = 1e-3;
const ROW_SMOOTHING: usize = 9;

/// Non-learned detector for high-contrast bone phantoms.
///
/// Bilateral images are split at the vertical midline and each half yields one
/// candidate; other images yield one. Within a region the joint column is the
/// centroid of columns carrying at least half the peak bone mass, and the
/// joint row is the darkest smoothed row between the first and last bone rows
/// of that column band. Confidence is the contrast between the bone band and
/// that gap row, floored at 0.001.
pub fn heuristic_detect(img: &NormalizedImage) -> Vec<JointDetection> {
    let w = img.width();
    let regions: Vec<(usize, usize)> = match img.laterality() {
        Laterality::Bilateral => vec![(0, w / 2), (w / 2, w)],
        _ => vec![(0, w)],
    };
    regions
        .into_iter()
        .map(|(x0, x1)| detect_in_columns(img, x0, x1))
        .collect()
}

fn detect_in_columns(img: &NormalizedImage, x0: usize, x1: usize) -> JointDetection {
    let px = img.pixels();
    let h = img.height();
    let background = {
        let mut v: Vec<f32> = px.data().to_vec();
        v.sort_by(f32::total_cmp);
        f64::from(v[v.len() / 10])
    };

    let mass: Vec<f64> = (x0..x1)
        .map(|x| {
            (0..h)
                .map(|y| (f64::from(px.get(x, y)) - background).max(0.0))
                .sum()
        })
        .collect();
    let peak = mass.iter().cloned().fold(0.0, f64::max);
    let (mut sum_w, mut sum_x) = (0.0, 0.0);
    let mut band = Vec::new();
    for (i, &m) in mass.iter().enumerate() {
        if peak > 0.0 && m >= 0.5 * peak {
            sum_w += m;
            sum_x += m * (x0 + i) as f64;
            band.push(x0 + i);
        }
    }
    let cx = if sum_w > 0.0 {
        sum_x / sum_w
    } else {
        (x0 + x1) as f64 / 2.0
    };
    if band.is_empty() {
        band = (x0..x1).collect();
    }

    let profile: Vec<f64> = (0..h)
        .map(|y| band.iter().map(|&x| f64::from(px.get(x, y))).sum::<f64>() / band.len() as f64)
        .collect();
    let smooth: Vec<f64> = (0..h)
        .map(|y| {
            let lo = y.saturating_sub(ROW_SMOOTHING / 2);
            let hi = (y + ROW_SMOOTHING / 2 + 1).min(h);
            profile[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let bone_level = profile.iter().cloned().fold(f64::MIN, f64::max);
    let threshold = background + 0.5 * (bone_level - background);
    let first = profile.iter().position(|&v| v >= threshold);
    let last = profile.iter().rposition(|&v| v >= threshold);
    let (cy, contrast) = match (first, last) {
        (Some(a), Some(b)) if b > a + 1 => {
            let (mut best_y, mut best_v) = (a, f64::MAX);
            for (y, &v) in smooth.iter().enumerate().take(b).skip(a + 1) {
                if v < best_v {
                    best_v = v;
                    best_y = y;
                }
            }
            (best_y as f64, (bone_level - best_v).clamp(0.0, 1.0))
        }
        _ => (h as f64 / 2.0, 0.0),
    };
    let center = Point::new(cx, cy);
    JointDetection::centered(center, contrast.max(CONFIDENCE_FLOOR))
        .expect("center lies in its own synthesized box")
}
