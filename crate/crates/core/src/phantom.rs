//! Geometric knee phantoms with exact ground truth.
//!
//! Each knee is a bright femur block above a bright tibia block. The lower
//! femur edge is flat or V-shaped per condyle and the tibia follows it at a
//! prescribed gap, so every column's joint-space width is known exactly.
//! Geometry is laid out in the 672×672 patch frame centered on the knee.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classify::{ROI_CENTER, ROI_SIZE};
use crate::detect::{CandidateRecord, DetectionDocument, JointDetection, KneeSlot, Point};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::ingest::{Laterality, NormalizedImage};
use crate::jsd::{assign_sides, ImageSide, PixelPoint, SideMap, CENTER_MARGIN, LINE_OFFSETS};
use crate::segment::{BoneMaskPair, Mask, MaskDocument, MaskRecord};

/// Bone half-width in columns.
pub const BONE_HALF_WIDTH: i64 = 150;
/// Bone extent above and below the joint center, in rows.
pub const BONE_HALF_HEIGHT: i64 = 250;
/// Horizontal distance from the joint center to each condyle apex.
pub const APEX_OFFSET: i64 = 80;
/// Columns either side of the apex over which a wedge keeps widening.
pub const WEDGE_REACH: i64 = 20;
pub const MIN_GAP_PX: u32 = 2;
/// Minimum bone thickness kept above and below the gap.
const MIN_BONE_ROWS: i64 = 20;
/// Confidence written to emitted detection records.
pub const FIXTURE_CONFIDENCE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CondyleShape {
    Flat,
    Vee,
    Wedge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomKnee {
    /// Joint center in image pixels.
    pub center: [i64; 2],
    pub gap_med_px: u32,
    pub gap_lat_px: u32,
    pub condyle_shape: CondyleShape,
    /// Gap change per column away from the apex (wedge only).
    #[serde(default)]
    pub wedge_slope: f64,
}

fn default_background() -> f32 {
    0.1
}

fn default_bone() -> f32 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub source_id: String,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub laterality: Laterality,
    #[serde(default = "default_background")]
    pub background: f32,
    #[serde(default = "default_bone")]
    pub bone: f32,
    #[serde(default)]
    pub noise_sd: f64,
    pub knees: Vec<PhantomKnee>,
}

impl PhantomSpec {
    /// Bilateral 1400×900 study with two knees at the quarter columns.
    pub fn bilateral(source_id: impl Into<String>, seed: u64, left: PhantomKnee, right: PhantomKnee) -> Self {
        Self {
            source_id: source_id.into(),
            seed,
            width: 1400,
            height: 900,
            laterality: Laterality::Bilateral,
            background: default_background(),
            bone: default_bone(),
            noise_sd: 0.0,
            knees: vec![left, right],
        }
    }
}

impl PhantomKnee {
    pub fn new(center: [i64; 2], gap_med_px: u32, gap_lat_px: u32, condyle_shape: CondyleShape) -> Self {
        Self {
            center,
            gap_med_px,
            gap_lat_px,
            condyle_shape,
            wedge_slope: 0.0,
        }
    }

    pub fn wedge(center: [i64; 2], gap_med_px: u32, gap_lat_px: u32, slope: f64) -> Self {
        Self {
            wedge_slope: slope,
            ..Self::new(center, gap_med_px, gap_lat_px, CondyleShape::Wedge)
        }
    }

    fn bone_box(&self) -> (i64, i64, i64, i64) {
        let [cx, cy] = self.center;
        (
            cx - BONE_HALF_WIDTH,
            cy - BONE_HALF_HEIGHT,
            cx + BONE_HALF_WIDTH,
            cy + BONE_HALF_HEIGHT,
        )
    }
}

/// Exact joint-space width of one patch column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnGap {
    pub column: usize,
    /// Bottom-most femur row.
    pub femur_row: usize,
    /// Top-most tibia row.
    pub tibia_row: usize,
    pub gap_px: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KneeTruth {
    pub slot: KneeSlot,
    pub center: [i64; 2],
    pub image_side: ImageSide,
    pub side_map: SideMap,
    pub condyle_shape: CondyleShape,
    /// Image coordinates of the patch's top-left pixel.
    pub origin: (i64, i64),
    pub masks: BoneMaskPair,
    /// One entry per bone column, ascending.
    pub gap_table: Vec<ColumnGap>,
    pub lowest_med: PixelPoint,
    pub lowest_lat: PixelPoint,
    pub d_avg_med: f64,
    pub d_avg_lat: f64,
}

impl KneeTruth {
    pub fn gap_at(&self, column: usize) -> Option<&ColumnGap> {
        self.gap_table.iter().find(|g| g.column == column)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub source_id: String,
    pub laterality: Laterality,
    pub knees: Vec<KneeTruth>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidPhantom(msg.into())
}

fn validate(spec: &PhantomSpec) -> Result<()> {
    if spec.source_id.is_empty() {
        return Err(invalid("empty source_id"));
    }
    if spec.width < 64 || spec.height < 64 {
        return Err(invalid(format!("image {}x{} too small", spec.width, spec.height)));
    }
    for (name, v) in [("background", spec.background), ("bone", spec.bone)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(invalid(format!("{name} intensity {v} outside [0, 1]")));
        }
    }
    if !(spec.noise_sd.is_finite() && spec.noise_sd >= 0.0) {
        return Err(invalid("noise_sd must be non-negative"));
    }
    let max_knees = match spec.laterality {
        Laterality::Bilateral => 2,
        Laterality::Left | Laterality::Right => 1,
        Laterality::Unknown => return Err(invalid("laterality must be known")),
    };
    if spec.knees.is_empty() || spec.knees.len() > max_knees {
        return Err(invalid(format!(
            "{} knees for a {:?} study",
            spec.knees.len(),
            spec.laterality
        )));
    }
    let (w, h) = (spec.width as i64, spec.height as i64);
    for (i, k) in spec.knees.iter().enumerate() {
        let (x0, y0, x1, y1) = k.bone_box();
        if x0 < 0 || y0 < 0 || x1 >= w || y1 >= h {
            return Err(invalid(format!("knee {i} extends outside the image")));
        }
        let [cx, cy] = k.center;
        let near = [cx, cy, w - 1 - cx, h - 1 - cy]
            .iter()
            .filter(|&&d| d < ROI_CENTER as i64)
            .count();
        if near > 1 {
            return Err(invalid(format!("knee {i} is within {ROI_CENTER} px of more than one border")));
        }
        if k.gap_med_px < MIN_GAP_PX || k.gap_lat_px < MIN_GAP_PX {
            return Err(invalid(format!("knee {i}: gaps must be at least {MIN_GAP_PX} px")));
        }
        if !k.wedge_slope.is_finite() {
            return Err(invalid(format!("knee {i}: non-finite wedge slope")));
        }
    }
    if let [a, b] = spec.knees.as_slice() {
        let (a0, a1, a2, a3) = a.bone_box();
        let (b0, b1, b2, b3) = b.bone_box();
        if a0 <= b2 && b0 <= a2 && a1 <= b3 && b1 <= a3 {
            return Err(invalid("knees overlap"));
        }
    }
    Ok(())
}

/// Femur bottom and tibia top rows for every bone column of one knee, in the patch frame.
fn column_profile(knee: &PhantomKnee, side_map: SideMap) -> Result<Vec<ColumnGap>> {
    let c = ROI_CENTER as i64;
    let mut out = Vec::new();
    for x in (c - BONE_HALF_WIDTH)..=(c + BONE_HALF_WIDTH) {
        let half = if x < c { ImageSide::Left } else { ImageSide::Right };
        let base_gap = i64::from(if half == side_map.medial {
            knee.gap_med_px
        } else {
            knee.gap_lat_px
        });
        let apex = match half {
            ImageSide::Left => c - APEX_OFFSET,
            ImageSide::Right => c + APEX_OFFSET,
        };
        let rise = match knee.condyle_shape {
            CondyleShape::Flat => 0,
            CondyleShape::Vee | CondyleShape::Wedge => (x - apex).unsigned_abs().div_ceil(2) as i64,
        };
        let gap = match knee.condyle_shape {
            CondyleShape::Wedge => {
                base_gap + (knee.wedge_slope * (x - apex).clamp(-WEDGE_REACH, WEDGE_REACH) as f64).round() as i64
            }
            _ => base_gap,
        };
        if gap < i64::from(MIN_GAP_PX) {
            return Err(invalid(format!("gap {gap} px at patch column {x}")));
        }
        let femur = c - (base_gap + 1) / 2 - 1 - rise;
        let tibia = femur + gap + 1;
        if femur < c - BONE_HALF_HEIGHT + MIN_BONE_ROWS || tibia > c + BONE_HALF_HEIGHT - MIN_BONE_ROWS {
            return Err(invalid(format!("gap profile leaves the bone at patch column {x}")));
        }
        out.push(ColumnGap {
            column: x as usize,
            femur_row: femur as usize,
            tibia_row: tibia as usize,
            gap_px: gap as u32,
        });
    }
    Ok(out)
}

fn masks_from_profile(profile: &[ColumnGap]) -> Result<BoneMaskPair> {
    let c = ROI_CENTER as i64;
    let top = (c - BONE_HALF_HEIGHT) as usize;
    let bottom = (c + BONE_HALF_HEIGHT) as usize;
    let first = profile[0].column;
    let col = |x: usize| profile.get(x.wrapping_sub(first)).filter(|g| g.column == x);
    let upper = Mask::from_fn(ROI_SIZE, ROI_SIZE, |x, y| {
        col(x).is_some_and(|g| y >= top && y <= g.femur_row)
    });
    let lower = Mask::from_fn(ROI_SIZE, ROI_SIZE, |x, y| {
        col(x).is_some_and(|g| y >= g.tibia_row && y <= bottom)
    });
    BoneMaskPair::new(upper, lower)
}

/// Lowest femur point of one patch half: the apex for shaped condyles, or the
/// column nearest the split for flat ones.
fn analytic_lowest(knee: &PhantomKnee, half: ImageSide, profile: &[ColumnGap]) -> PixelPoint {
    let c = ROI_CENTER as i64;
    let x = match (knee.condyle_shape, half) {
        (CondyleShape::Flat, ImageSide::Left) => c - CENTER_MARGIN as i64 - 1,
        (CondyleShape::Flat, ImageSide::Right) => c + CENTER_MARGIN as i64 + 1,
        (_, ImageSide::Left) => c - APEX_OFFSET,
        (_, ImageSide::Right) => c + APEX_OFFSET,
    } as usize;
    let g = profile.iter().find(|g| g.column == x).expect("apex inside bone");
    PixelPoint { x, y: g.femur_row }
}

fn sampled_mean(profile: &[ColumnGap], at: PixelPoint) -> f64 {
    let sum: u32 = LINE_OFFSETS
        .iter()
        .map(|&d| {
            let x = (at.x as i64 + d) as usize;
            profile.iter().find(|g| g.column == x).expect("sampled column inside bone").gap_px
        })
        .sum();
    f64::from(sum) / LINE_OFFSETS.len() as f64
}

fn knee_image_side(spec: &PhantomSpec, knee: &PhantomKnee) -> ImageSide {
    if (knee.center[0] as f64) < spec.width as f64 / 2.0 {
        ImageSide::Left
    } else {
        ImageSide::Right
    }
}

/// Renders the study and its ground truth. Deterministic per spec.
pub fn generate(spec: &PhantomSpec) -> Result<(NormalizedImage, PhantomTruth)> {
    validate(spec)?;
    let mut order: Vec<&PhantomKnee> = spec.knees.iter().collect();
    order.sort_by_key(|k| k.center[0]);

    let mut truths = Vec::new();
    for (i, knee) in order.iter().enumerate() {
        let image_side = knee_image_side(spec, knee);
        let side_map = assign_sides(spec.laterality, image_side)?;
        let profile = column_profile(knee, side_map)?;
        let masks = masks_from_profile(&profile)?;
        let pick = |half: ImageSide| analytic_lowest(knee, half, &profile);
        let lowest_med = pick(side_map.medial);
        let lowest_lat = pick(side_map.lateral());
        truths.push(KneeTruth {
            slot: if i == 0 { KneeSlot::Left } else { KneeSlot::Right },
            center: knee.center,
            image_side,
            side_map,
            condyle_shape: knee.condyle_shape,
            origin: (
                knee.center[0] - ROI_CENTER as i64,
                knee.center[1] - ROI_CENTER as i64,
            ),
            d_avg_med: sampled_mean(&profile, lowest_med),
            d_avg_lat: sampled_mean(&profile, lowest_lat),
            lowest_med,
            lowest_lat,
            masks,
            gap_table: profile,
        });
    }

    let mut pixels = Grid::filled(spec.width, spec.height, spec.background);
    for t in &truths {
        for y in 0..ROI_SIZE {
            for x in 0..ROI_SIZE {
                if t.masks.upper.get(x, y) || t.masks.lower.get(x, y) {
                    let (ix, iy) = (t.origin.0 + x as i64, t.origin.1 + y as i64);
                    if ix >= 0 && iy >= 0 && (ix as usize) < spec.width && (iy as usize) < spec.height {
                        pixels.set(ix as usize, iy as usize, spec.bone);
                    }
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| invalid(e.to_string()))?;
    for v in pixels.data_mut() {
        let n = if spec.noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        let x = (f64::from(*v) + n).clamp(0.0, 1.0);
        *v = ((x * 255.0).round() / 255.0) as f32;
    }

    let image = NormalizedImage::from_unit_pixels(pixels, spec.laterality, spec.source_id.clone())?;
    Ok((
        image,
        PhantomTruth {
            source_id: spec.source_id.clone(),
            laterality: spec.laterality,
            knees: truths,
        },
    ))
}

/// Detection and mask documents that let the file-backed backends replay the truth.
pub fn emit_backend_fixtures(truth: &PhantomTruth) -> (MaskDocument, DetectionDocument) {
    let mut records = BTreeMap::new();
    let mut candidates = Vec::new();
    for k in &truth.knees {
        records.insert(k.slot, MaskRecord::encode(&k.masks, k.origin));
        let center = Point::new(k.center[0] as f64, k.center[1] as f64);
        let det = JointDetection::centered(center, FIXTURE_CONFIDENCE).expect("finite center");
        candidates.push(CandidateRecord::from_detection(&det, false));
    }
    (
        BTreeMap::from([(truth.source_id.clone(), records)]),
        BTreeMap::from([(truth.source_id.clone(), candidates)]),
    )
}

/// Parses one spec or a list of specs.
pub fn parse_specs(text: &str) -> Result<Vec<PhantomSpec>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        Many(Vec<PhantomSpec>),
        One(Box<PhantomSpec>),
    }
    Ok(match serde_json::from_str(text)? {
        OneOrMany::Many(v) => v,
        OneOrMany::One(s) => vec![*s],
    })
}
