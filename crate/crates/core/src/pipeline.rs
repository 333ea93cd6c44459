//! Per-study orchestration of the five grading steps with per-knee fault isolation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classify::{classify, extract_roi, ClassifierBackend, ProbabilityVector};
use crate::detect::{heuristic_detect, load_candidates, select_knees, DetectionDocument, JointDetection, KneeSlot, Point};
use crate::error::{Error, Result};
use crate::fuse::{assemble_features, model_hash, predict, KlAssessment, RandomForestModel};
use crate::ingest::{Laterality, NormalizedImage};
use crate::jsd::{assign_sides, find_lowest_points, measure_jsd, ImageSide, JsdMeasurement, JsnGrades, PixelPoint, ThresholdSet};
use crate::segment::{adaptive_gamma, laplacian_sharpen, segment, BoneMaskPair, SegmentationBackend, DEFAULT_SHARPEN_RATIO};
use crate::VERSION;

/// Source of joint-center candidates for a whole image.
pub trait DetectionBackend: Send + Sync {
    fn id(&self) -> String;
    fn candidates(&self, img: &NormalizedImage) -> Result<Vec<JointDetection>>;
}

/// Replays a detection-results document.
#[derive(Debug, Clone)]
pub struct FileDetector {
    doc: DetectionDocument,
    label: String,
}

impl FileDetector {
    pub fn new(doc: DetectionDocument, label: impl Into<String>) -> Self {
        Self {
            doc,
            label: label.into(),
        }
    }
}

impl DetectionBackend for FileDetector {
    fn id(&self) -> String {
        format!("file:{}", self.label)
    }

    fn candidates(&self, img: &NormalizedImage) -> Result<Vec<JointDetection>> {
        load_candidates(&self.doc, img.source_id())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicDetector;

impl DetectionBackend for HeuristicDetector {
    fn id(&self) -> String {
        "heuristic".into()
    }

    fn candidates(&self, img: &NormalizedImage) -> Result<Vec<JointDetection>> {
        Ok(heuristic_detect(img))
    }
}

pub struct Backends<'a> {
    pub detector: &'a dyn DetectionBackend,
    pub classifier: &'a dyn ClassifierBackend,
    pub segmenter: &'a dyn SegmentationBackend,
}

impl Backends<'_> {
    pub fn ids(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("detector".to_string(), self.detector.id()),
            ("classifier".to_string(), self.classifier.id()),
            ("segmenter".to_string(), self.segmenter.id()),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub thresholds: ThresholdSet,
    pub sharpen_ratio: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            thresholds: ThresholdSet::published(),
            sharpen_ratio: DEFAULT_SHARPEN_RATIO,
        }
    }
}

/// SHA-256 over the configuration, the model document and the backend identifiers.
pub fn config_hash(config: &PipelineConfig, model: &RandomForestModel, backends: &Backends) -> String {
    #[derive(Serialize)]
    struct Canonical<'a> {
        config: &'a PipelineConfig,
        model: String,
        backends: BTreeMap<String, String>,
        version: &'a str,
    }
    let text = serde_json::to_string(&Canonical {
        config,
        model: model_hash(model),
        backends: backends.ids(),
        version: VERSION,
    })
    .expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Detect,
    Roi,
    Classify,
    Enhance,
    Segment,
    Measure,
    Grade,
    Fuse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub error: String,
}

fn at<T>(stage: Stage, r: Result<T>) -> std::result::Result<T, StageFailure> {
    r.map_err(|e| StageFailure {
        stage,
        error: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsdSummary {
    pub med_mm: f64,
    pub lat_mm: f64,
    pub med_px: f64,
    pub lat_px: f64,
    pub valid_lines_med: usize,
    pub valid_lines_lat: usize,
    pub lowest_med: PixelPoint,
    pub lowest_lat: PixelPoint,
    pub medial_side: ImageSide,
}

impl From<&JsdMeasurement> for JsdSummary {
    fn from(j: &JsdMeasurement) -> Self {
        Self {
            med_mm: j.med_mm,
            lat_mm: j.lat_mm,
            med_px: j.med_px,
            lat_px: j.lat_px,
            valid_lines_med: j.valid_line_count_med(),
            valid_lines_lat: j.valid_line_count_lat(),
            lowest_med: j.lowest_med,
            lowest_lat: j.lowest_lat,
            medial_side: j.side_map.medial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradedKnee {
    pub assessment: KlAssessment,
    pub probabilities: ProbabilityVector,
    pub jsn: JsnGrades,
    pub jsd: JsdSummary,
    pub gamma: f64,
    pub pad_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum KneeOutcome {
    Graded(Box<GradedKnee>),
    Failed(StageFailure),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KneeReport {
    pub slot: KneeSlot,
    pub center: Point,
    pub confidence: f64,
    pub image_side: ImageSide,
    pub outcome: KneeOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub source_id: String,
    pub laterality: Laterality,
    pub software_version: String,
    pub config_hash: String,
    pub backends: BTreeMap<String, String>,
    pub flags: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection_failure: Option<StageFailure>,
    pub knees: Vec<KneeReport>,
}

impl StudyReport {
    pub fn graded_count(&self) -> usize {
        self.knees
            .iter()
            .filter(|k| matches!(k.outcome, KneeOutcome::Graded(_)))
            .count()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Geometry kept for rendering: the masks and the measurement behind the report.
#[derive(Debug, Clone, PartialEq)]
pub struct KneeArtifacts {
    pub slot: KneeSlot,
    pub origin: (i64, i64),
    pub masks: BoneMaskPair,
    pub jsd: JsdMeasurement,
    pub assessment: KlAssessment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub report: StudyReport,
    pub artifacts: Vec<KneeArtifacts>,
}

/// Bilateral images are split at the vertical midline.
pub fn knee_image_side(img: &NormalizedImage, center: Point) -> ImageSide {
    if center.x < img.width() as f64 / 2.0 {
        ImageSide::Left
    } else {
        ImageSide::Right
    }
}

fn grade_knee(
    img: &NormalizedImage,
    slot: KneeSlot,
    det: &JointDetection,
    backends: &Backends,
    model: &RandomForestModel,
    config: &PipelineConfig,
) -> std::result::Result<(GradedKnee, KneeArtifacts), StageFailure> {
    let source = img.source_id();
    let roi = at(Stage::Roi, extract_roi(img, det.center))?;
    let probs = at(Stage::Classify, classify(backends.classifier, &roi, source, slot))?;

    let (gamma_roi, gamma) = adaptive_gamma(&roi);
    let enhanced = at(Stage::Enhance, laplacian_sharpen(&gamma_roi, config.sharpen_ratio))?;
    let masks = at(Stage::Segment, segment(backends.segmenter, &enhanced, source, slot))?;

    let jsd = at(Stage::Measure, (|| {
        let side_map = assign_sides(img.laterality(), knee_image_side(img, det.center))?;
        let lowest = find_lowest_points(&masks, roi.joint_center_in_patch.0)?;
        measure_jsd(&masks, &lowest, side_map)
    })())?;
    let jsn = at(Stage::Grade, config.thresholds.grade(&jsd))?;

    let mut assessment = at(Stage::Fuse, (|| {
        let fv = assemble_features(&probs, &jsd)?;
        predict(model, &fv)
    })())?;
    assessment.jsn = Some(jsn);
    assessment.provenance = backends.ids();
    assessment.provenance.insert("med_mm".into(), format!("{:.3}", jsd.med_mm));
    assessment.provenance.insert("lat_mm".into(), format!("{:.3}", jsd.lat_mm));
    assessment.provenance.insert("model".into(), model.training_fingerprint().to_string());

    let graded = GradedKnee {
        assessment: assessment.clone(),
        probabilities: probs,
        jsn,
        jsd: JsdSummary::from(&jsd),
        gamma,
        pad_fraction: roi.pad_fraction,
    };
    let artifacts = KneeArtifacts {
        slot,
        origin: roi.origin,
        masks,
        jsd,
        assessment,
    };
    Ok((graded, artifacts))
}

/// Steps 2 to 5 on a normalized image. A failing knee is reported with its
/// stage and never stops the other knee.
pub fn grade_study(
    img: &NormalizedImage,
    backends: &Backends,
    model: &RandomForestModel,
    config: &PipelineConfig,
) -> Result<StudyResult> {
    if model.trees().is_empty() {
        return Err(Error::UntrainedModel);
    }
    let mut report = StudyReport {
        source_id: img.source_id().to_string(),
        laterality: img.laterality(),
        software_version: VERSION.to_string(),
        config_hash: config_hash(config, model, backends),
        backends: backends.ids(),
        flags: Vec::new(),
        detection_failure: None,
        knees: Vec::new(),
    };
    if img.degenerate_window() {
        report.flags.push("degenerate_window".into());
    }
    let pair = match at(
        Stage::Detect,
        backends.detector.candidates(img).and_then(|c| select_knees(&c)),
    ) {
        Ok(p) => p,
        Err(f) => {
            report.detection_failure = Some(f);
            return Ok(StudyResult {
                report,
                artifacts: Vec::new(),
            });
        }
    };
    if pair.single_knee_flag {
        report.flags.push("single_knee".into());
    }

    let mut artifacts = Vec::new();
    for (slot, det) in pair.knees() {
        let outcome = match grade_knee(img, slot, &det, backends, model, config) {
            Ok((graded, art)) => {
                artifacts.push(art);
                KneeOutcome::Graded(Box::new(graded))
            }
            Err(f) => KneeOutcome::Failed(f),
        };
        report.knees.push(KneeReport {
            slot,
            center: det.center,
            confidence: det.confidence,
            image_side: knee_image_side(img, det.center),
            outcome,
        });
    }
    Ok(StudyResult { report, artifacts })
}
