//! Joint-space distance measurement, JSN boundary calibration and grading.
//!
//! The gap is measured on a series of vertical lines near the lowest point
//! of the femur on each compartment. Each line counts the background pixels
//! strictly between the bottom-most femur pixel and the top-most tibia pixel
//! of its column; `D_avg` is the mean over the valid lines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Laterality, STANDARD_SPACING_MM};
use crate::segment::BoneMaskPair;

/// Columns excluded at the left and right patch edges.
pub const EDGE_MARGIN: usize = 34;
/// Columns excluded on each side of the split column.
pub const CENTER_MARGIN: usize = 17;
/// Column offsets sampled around each lowest point.
pub const LINE_OFFSETS: [i64; 15] = [-14, -12, -10, -8, -6, -4, -2, 0, 2, 4, 6, 8, 10, 12, 14];
pub const MIN_VALID_LINES: usize = 5;
pub const NUM_JSN_CLASSES: usize = 4;

/// Left or right half of a patch (or image) as displayed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSide {
    Left,
    Right,
}

impl ImageSide {
    pub fn opposite(self) -> Self {
        match self {
            ImageSide::Left => ImageSide::Right,
            ImageSide::Right => ImageSide::Left,
        }
    }
}

/// A patch pixel (column, row).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub x: usize,
    pub y: usize,
}

/// Lowest femur pixels in the left and right halves of the patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LowestPoints {
    pub left: PixelPoint,
    pub right: PixelPoint,
}

/// Which half of the patch holds the medial compartment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideMap {
    pub medial: ImageSide,
}

impl SideMap {
    pub fn lateral(&self) -> ImageSide {
        self.medial.opposite()
    }
}

/// One measured vertical line: patch column, top-most tibia row excluded
/// and bottom-most femur row excluded, gap length in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapLine {
    pub column: usize,
    pub upper_row: usize,
    pub lower_row: usize,
    pub gap_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsdMeasurement {
    pub med_px: f64,
    pub lat_px: f64,
    pub med_mm: f64,
    pub lat_mm: f64,
    pub lowest_med: PixelPoint,
    pub lowest_lat: PixelPoint,
    pub med_lines: Vec<GapLine>,
    pub lat_lines: Vec<GapLine>,
    pub side_map: SideMap,
}

impl JsdMeasurement {
    pub fn valid_line_count_med(&self) -> usize {
        self.med_lines.len()
    }

    pub fn valid_line_count_lat(&self) -> usize {
        self.lat_lines.len()
    }
}

/// Per-half lowest femur pixel.
///
/// Halves exclude `EDGE_MARGIN` columns at the patch borders and
/// `CENTER_MARGIN` columns on either side of `split_col`. Ties on the row go
/// to the column nearest `split_col`.
pub fn find_lowest_points(masks: &BoneMaskPair, split_col: usize) -> Result<LowestPoints> {
    let w = masks.width();
    let left_cols = EDGE_MARGIN..split_col.saturating_sub(CENTER_MARGIN);
    let right_cols = (split_col + CENTER_MARGIN + 1)..w.saturating_sub(EDGE_MARGIN);
    let left = lowest_in(masks, left_cols.rev()).ok_or(Error::NoUpperPixels("left"))?;
    let right = lowest_in(masks, right_cols).ok_or(Error::NoUpperPixels("right"))?;
    Ok(LowestPoints { left, right })
}

/// `columns` must be ordered nearest-to-split first so ties keep the first hit.
fn lowest_in(masks: &BoneMaskPair, columns: impl Iterator<Item = usize>) -> Option<PixelPoint> {
    let mut best: Option<PixelPoint> = None;
    for x in columns {
        if let Some(y) = bottom_of(&masks.upper, x, masks.height()) {
            if best.is_none_or(|b| y > b.y) {
                best = Some(PixelPoint { x, y });
            }
        }
    }
    best
}

fn bottom_of(mask: &crate::segment::Mask, x: usize, h: usize) -> Option<usize> {
    (0..h).rev().find(|&y| mask.get(x, y))
}

/// Medial compartment side for a knee.
///
/// Bilateral PA views: medial faces the image midline, so a knee in the left
/// half of the image has its medial compartment on its right. Single-knee
/// views: a right knee has medial on the viewer's right, a left knee on the
/// viewer's left.
pub fn assign_sides(laterality: Laterality, knee_image_side: ImageSide) -> Result<SideMap> {
    let medial = match laterality {
        Laterality::Bilateral => knee_image_side.opposite(),
        Laterality::Right => ImageSide::Right,
        Laterality::Left => ImageSide::Left,
        Laterality::Unknown => return Err(Error::UnknownLaterality),
    };
    Ok(SideMap { medial })
}

/// Gap lines around `lowest` on `column ± {0, 2, …, 14}`.
pub fn gap_lines(masks: &BoneMaskPair, lowest: PixelPoint) -> Vec<GapLine> {
    let (w, h) = (masks.width() as i64, masks.height());
    LINE_OFFSETS
        .iter()
        .filter_map(|&dx| {
            let x = lowest.x as i64 + dx;
            if x < 0 || x >= w {
                return None;
            }
            let x = x as usize;
            let upper_row = bottom_of(&masks.upper, x, h)?;
            let lower_row = (upper_row + 1..h).find(|&y| masks.lower.get(x, y))?;
            Some(GapLine {
                column: x,
                upper_row,
                lower_row,
                gap_px: (lower_row - upper_row - 1) as f64,
            })
        })
        .collect()
}

fn mean_gap(lines: &[GapLine], side: &'static str) -> Result<f64> {
    if lines.len() < MIN_VALID_LINES {
        return Err(Error::TooFewLines {
            side,
            count: lines.len(),
        });
    }
    Ok(lines.iter().map(|l| l.gap_px).sum::<f64>() / lines.len() as f64)
}

/// Medial and lateral `D_avg` from cleaned masks.
pub fn measure_jsd(
    masks: &BoneMaskPair,
    lowest: &LowestPoints,
    side_map: SideMap,
) -> Result<JsdMeasurement> {
    let pick = |side: ImageSide| match side {
        ImageSide::Left => lowest.left,
        ImageSide::Right => lowest.right,
    };
    let lowest_med = pick(side_map.medial);
    let lowest_lat = pick(side_map.lateral());
    let med_lines = gap_lines(masks, lowest_med);
    let lat_lines = gap_lines(masks, lowest_lat);
    let med_px = mean_gap(&med_lines, "medial")?;
    let lat_px = mean_gap(&lat_lines, "lateral")?;
    Ok(JsdMeasurement {
        med_px,
        lat_px,
        med_mm: med_px * STANDARD_SPACING_MM,
        lat_mm: lat_px * STANDARD_SPACING_MM,
        lowest_med,
        lowest_lat,
        med_lines,
        lat_lines,
        side_map,
    })
}

/// Three ascending JSN class boundaries per compartment, in pixels at 0.2 mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub med: [f64; 3],
    pub lat: [f64; 3],
    pub units: String,
}

pub const THRESHOLD_UNITS: &str = "px@0.2mm";

impl ThresholdSet {
    pub fn new(med: [f64; 3], lat: [f64; 3]) -> Result<Self> {
        for b in [&med, &lat] {
            let ok = b.iter().all(|v| v.is_finite() && *v > 0.0) && b[0] < b[1] && b[1] < b[2];
            if !ok {
                return Err(Error::InvalidThresholds(format!("{b:?} must be positive and ascending")));
            }
        }
        Ok(Self {
            med,
            lat,
            units: THRESHOLD_UNITS.to_string(),
        })
    }

    /// Published boundaries: medial (8, 17, 23), lateral (7, 14, 24).
    pub fn published() -> Self {
        Self::new([8.0, 17.0, 23.0], [7.0, 14.0, 24.0]).expect("valid constants")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: ThresholdSet = serde_json::from_str(text)?;
        if t.units != THRESHOLD_UNITS {
            return Err(Error::InvalidThresholds(format!("unsupported units `{}`", t.units)));
        }
        Self::new(t.med, t.lat)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn grade(&self, jsd: &JsdMeasurement) -> Result<JsnGrades> {
        Ok(JsnGrades {
            med: grade_jsn(jsd.med_px, &self.med)?,
            lat: grade_jsn(jsd.lat_px, &self.lat)?,
        })
    }
}

impl Default for ThresholdSet {
    fn default() -> Self {
        Self::published()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsnGrades {
    pub med: u8,
    pub lat: u8,
}

/// JSN grade 0..=3: the number of boundaries strictly above `jsd_px`.
///
/// Wider gaps are healthier; a distance equal to a boundary takes the lower grade.
pub fn grade_jsn(jsd_px: f64, boundaries: &[f64; 3]) -> Result<u8> {
    if jsd_px.is_nan() || jsd_px < 0.0 {
        return Err(Error::NegativeDistance(jsd_px));
    }
    Ok(boundaries.iter().filter(|&&b| b > jsd_px).count() as u8)
}

/// Optimal contiguous partition of sorted data.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Ascending distinct values.
    pub values: Vec<f64>,
    /// Start index into `values` of each class; `starts[0] == 0`.
    pub starts: Vec<usize>,
    /// Total within-class sum of squared deviations (multiplicity-weighted).
    pub cost: f64,
}

impl Partition {
    /// Midpoints between the last value of class i and the first of class i+1.
    pub fn boundaries(&self) -> Vec<f64> {
        self.starts[1..]
            .iter()
            .map(|&s| (self.values[s - 1] + self.values[s]) / 2.0)
            .collect()
    }
}

/// Minimum within-class variance partition of 1-D data into `k` classes.
///
/// Equal values are never split across classes. Exact dynamic programming over
/// distinct values with prefix sums: O(k·m²) for m distinct values.
pub fn optimal_partition(data: &[f64], k: usize) -> Result<Partition> {
    if k == 0 {
        return Err(Error::InsufficientDistinct { needed: 1, found: 0 });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidThresholds("non-finite distance".into()));
    }
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut values: Vec<f64> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for v in sorted {
        if values.last() == Some(&v) {
            *weights.last_mut().expect("non-empty") += 1.0;
        } else {
            values.push(v);
            weights.push(1.0);
        }
    }
    let m = values.len();
    if m < k {
        return Err(Error::InsufficientDistinct { needed: k, found: m });
    }

    // Center for numerical stability of the prefix-sum variance.
    let shift = values[m / 2];
    let mut pw = vec![0.0; m + 1];
    let mut p1 = vec![0.0; m + 1];
    let mut p2 = vec![0.0; m + 1];
    for i in 0..m {
        let v = values[i] - shift;
        pw[i + 1] = pw[i] + weights[i];
        p1[i + 1] = p1[i] + weights[i] * v;
        p2[i + 1] = p2[i] + weights[i] * v * v;
    }
    // SSE of distinct values [a, b).
    let sse = |a: usize, b: usize| -> f64 {
        let w = pw[b] - pw[a];
        let s = p1[b] - p1[a];
        (p2[b] - p2[a] - s * s / w).max(0.0)
    };

    // cost[j][i]: best cost of the first i values in j+1 classes.
    let mut cost = vec![vec![f64::INFINITY; m + 1]; k];
    let mut arg = vec![vec![0usize; m + 1]; k];
    for (i, c) in cost[0].iter_mut().enumerate().skip(1) {
        *c = sse(0, i);
    }
    for j in 1..k {
        for i in (j + 1)..=m {
            let (mut best, mut best_s) = (f64::INFINITY, j);
            for (s, &prev) in cost[j - 1].iter().enumerate().take(i).skip(j) {
                let c = prev + sse(s, i);
                if c < best {
                    best = c;
                    best_s = s;
                }
            }
            cost[j][i] = best;
            arg[j][i] = best_s;
        }
    }

    let mut starts = vec![0usize; k];
    let mut end = m;
    for j in (1..k).rev() {
        let s = arg[j][end];
        starts[j] = s;
        end = s;
    }
    Ok(Partition {
        values,
        starts,
        cost: cost[k - 1][m],
    })
}

/// Boundaries and class occupancy for one compartment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideCalibration {
    pub boundaries: [f64; 3],
    pub occupancy: [usize; NUM_JSN_CLASSES],
}

fn calibrate_side(values: &[f64]) -> Result<SideCalibration> {
    let p = optimal_partition(values, NUM_JSN_CLASSES)?;
    let b = p.boundaries();
    let boundaries = [b[0], b[1], b[2]];
    let mut occupancy = [0usize; NUM_JSN_CLASSES];
    for &v in values {
        // Class index counted from the narrowest gap upward.
        let class = boundaries.iter().filter(|&&bd| v > bd).count();
        occupancy[class] += 1;
    }
    Ok(SideCalibration {
        boundaries,
        occupancy,
    })
}

/// Calibrated boundaries for both compartments plus per-class counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub med: SideCalibration,
    pub lat: SideCalibration,
}

impl Calibration {
    pub fn thresholds(&self) -> Result<ThresholdSet> {
        ThresholdSet::new(self.med.boundaries, self.lat.boundaries)
    }
}

/// Per-compartment 4-class minimum-variance boundaries.
pub fn calibrate_thresholds(distances: &[(f64, f64)]) -> Result<Calibration> {
    let med: Vec<f64> = distances.iter().map(|d| d.0).collect();
    let lat: Vec<f64> = distances.iter().map(|d| d.1).collect();
    Ok(Calibration {
        med: calibrate_side(&med)?,
        lat: calibrate_side(&lat)?,
    })
}

/// Measurement table with `med_px` and `lat_px` columns (other columns ignored).
pub fn read_measurements(reader: impl std::io::Read) -> Result<Vec<(f64, f64)>> {
    #[derive(Deserialize)]
    struct Row {
        med_px: f64,
        lat_px: f64,
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize::<Row>() {
        let row = row?;
        for v in [row.med_px, row.lat_px] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::NegativeDistance(v));
            }
        }
        out.push((row.med_px, row.lat_px));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::Mask;
    use proptest::prelude::*;

    const N: usize = 672;

    /// Femur above `bottom(x)`, tibia from `bottom(x) + gap(x) + 1`.
    fn knee(bottom: impl Fn(usize) -> usize, gap: impl Fn(usize) -> usize) -> BoneMaskPair {
        let upper = Mask::from_fn(N, N, |x, y| (40..630).contains(&x) && y >= 100 && y <= bottom(x));
        let lower = Mask::from_fn(N, N, |x, y| {
            (40..630).contains(&x) && y > bottom(x) + gap(x) && y < 600
        });
        BoneMaskPair::new(upper, lower).unwrap()
    }

    #[test]
    fn flat_femur_ties_break_toward_split() {
        let m = knee(|_| 320, |_| 25);
        let lp = find_lowest_points(&m, 336).unwrap();
        assert_eq!(lp.left, PixelPoint { x: 336 - 18, y: 320 });
        assert_eq!(lp.right, PixelPoint { x: 336 + 18, y: 320 });
    }

    #[test]
    fn vee_apex_is_found() {
        let bottom = |x: usize| {
            let apex = if x < 336 { 200 } else { 470 };
            480 - (x as i64 - apex).unsigned_abs().div_ceil(2) as usize
        };
        let m = knee(bottom, |_| 20);
        let lp = find_lowest_points(&m, 336).unwrap();
        assert_eq!(lp.left, PixelPoint { x: 200, y: 480 });
        assert_eq!(lp.right, PixelPoint { x: 470, y: 480 });
    }

    #[test]
    fn empty_half_is_an_error() {
        let upper = Mask::from_fn(N, N, |x, y| x < 300 && (100..300).contains(&y));
        let lower = Mask::from_fn(N, N, |x, y| x < 300 && (350..600).contains(&y));
        let m = BoneMaskPair::new(upper, lower).unwrap();
        assert!(matches!(find_lowest_points(&m, 336), Err(Error::NoUpperPixels("right"))));
    }

    #[test]
    fn uniform_gap_measures_exactly() {
        let m = knee(|_| 320, |_| 25);
        let lp = find_lowest_points(&m, 336).unwrap();
        let side = assign_sides(Laterality::Bilateral, ImageSide::Left).unwrap();
        let j = measure_jsd(&m, &lp, side).unwrap();
        assert_eq!(j.med_px, 25.0);
        assert_eq!(j.lat_px, 25.0);
        assert_eq!(j.med_mm, 5.0);
        assert_eq!(j.valid_line_count_med(), 15);
        assert_eq!(j.lowest_med, lp.right);
    }

    #[test]
    fn wedge_gap_averages_sampled_columns() {
        // Gap grows 0.5 px per column around the left apex at x = 200.
        let bottom = |x: usize| {
            let apex = if x < 336 { 200 } else { 470 };
            480 - (x as i64 - apex).unsigned_abs().div_ceil(2) as usize
        };
        let gap = |x: usize| {
            if x < 336 {
                (25.0 + 0.5 * (x as f64 - 200.0)).round() as usize
            } else {
                25
            }
        };
        let m = knee(bottom, gap);
        let lp = find_lowest_points(&m, 336).unwrap();
        let j = measure_jsd(&m, &lp, SideMap { medial: ImageSide::Left }).unwrap();
        let oracle: f64 =
            LINE_OFFSETS.iter().map(|&d| gap((200 + d) as usize) as f64).sum::<f64>() / 15.0;
        assert_eq!(j.med_px, oracle);
        assert!((j.med_px - 25.0).abs() <= 0.5);
    }

    #[test]
    fn missing_tibia_under_most_lines_fails() {
        let upper = Mask::from_fn(N, N, |x, y| (40..630).contains(&x) && (100..=320).contains(&y));
        // Tibia only under columns 314..=318 on the left: 3 of the 15 sampled columns.
        let lower = Mask::from_fn(N, N, |x, y| {
            ((314..=318).contains(&x) || (340..630).contains(&x)) && (346..600).contains(&y)
        });
        let m = BoneMaskPair::new(upper, lower).unwrap();
        let lp = find_lowest_points(&m, 336).unwrap();
        let err = measure_jsd(&m, &lp, SideMap { medial: ImageSide::Right }).unwrap_err();
        assert!(matches!(err, Error::TooFewLines { side: "lateral", count: 3 }));
    }

    #[test]
    fn side_assignment_rules() {
        assert_eq!(
            assign_sides(Laterality::Bilateral, ImageSide::Left).unwrap().medial,
            ImageSide::Right
        );
        assert_eq!(
            assign_sides(Laterality::Bilateral, ImageSide::Right).unwrap().medial,
            ImageSide::Left
        );
        assert_eq!(assign_sides(Laterality::Right, ImageSide::Left).unwrap().medial, ImageSide::Right);
        assert_eq!(assign_sides(Laterality::Left, ImageSide::Left).unwrap().medial, ImageSide::Left);
        assert!(matches!(
            assign_sides(Laterality::Unknown, ImageSide::Left),
            Err(Error::UnknownLaterality)
        ));
    }

    #[test]
    fn jsn_counting_rule() {
        let b = [8.0, 17.0, 23.0];
        assert_eq!(grade_jsn(30.0, &b).unwrap(), 0);
        assert_eq!(grade_jsn(20.0, &b).unwrap(), 1);
        assert_eq!(grade_jsn(10.0, &b).unwrap(), 2);
        assert_eq!(grade_jsn(5.0, &b).unwrap(), 3);
        assert_eq!(grade_jsn(17.0, &b).unwrap(), 1);
        assert_eq!(grade_jsn(0.0, &b).unwrap(), 3);
        assert!(matches!(grade_jsn(-1.0, &b), Err(Error::NegativeDistance(_))));
    }

    #[test]
    fn published_defaults() {
        let t = ThresholdSet::published();
        assert_eq!(t.med, [8.0, 17.0, 23.0]);
        assert_eq!(t.lat, [7.0, 14.0, 24.0]);
        assert_eq!(ThresholdSet::from_json(&t.to_json()).unwrap(), t);
        assert!(ThresholdSet::new([3.0, 2.0, 5.0], [1.0, 2.0, 3.0]).is_err());
        assert!(ThresholdSet::from_json(r#"{"med":[1,2,3],"lat":[1,2,3],"units":"mm"}"#).is_err());
    }

    /// Exhaustive search over all cut positions of the sorted raw values.
    fn brute_force(data: &[f64], k: usize) -> (f64, Vec<f64>) {
        let mut v = data.to_vec();
        v.sort_by(f64::total_cmp);
        let sse = |s: &[f64]| {
            let mean = s.iter().sum::<f64>() / s.len() as f64;
            s.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
        };
        let mut best = (f64::INFINITY, Vec::new());
        let mut cuts = vec![0usize; k - 1];
        fn rec(
            v: &[f64],
            k: usize,
            depth: usize,
            from: usize,
            cuts: &mut Vec<usize>,
            best: &mut (f64, Vec<f64>),
            sse: &dyn Fn(&[f64]) -> f64,
        ) {
            if depth == k - 1 {
                let mut bounds = vec![0];
                bounds.extend(cuts.iter().copied());
                bounds.push(v.len());
                let cost: f64 = bounds.windows(2).map(|w| sse(&v[w[0]..w[1]])).sum();
                if cost < best.0 {
                    let b = cuts.iter().map(|&c| (v[c - 1] + v[c]) / 2.0).collect();
                    *best = (cost, b);
                }
                return;
            }
            for c in from..v.len() {
                if v.len() - c < k - 1 - depth {
                    break;
                }
                cuts[depth] = c;
                rec(v, k, depth + 1, c + 1, cuts, best, sse);
            }
        }
        rec(&v, k, 0, 1, &mut cuts, &mut best, &sse);
        best
    }

    #[test]
    fn calibration_examples_match_brute_force() {
        let a = [1.0, 2.0, 10.0, 11.0, 20.0, 21.0, 30.0, 31.0];
        let (_, bf) = brute_force(&a, 4);
        assert_eq!(bf, vec![6.0, 15.5, 25.5]);
        let p = optimal_partition(&a, 4).unwrap();
        assert_eq!(p.boundaries(), bf);
        assert_eq!(p.starts, vec![0, 2, 4, 6]);

        let b = [0.0, 0.0, 0.0, 10.0, 10.0, 10.0, 20.0, 20.0, 20.0, 30.0, 30.0, 30.0];
        let (_, bf) = brute_force(&b, 4);
        assert_eq!(bf, vec![5.0, 15.0, 25.0]);
        assert_eq!(optimal_partition(&b, 4).unwrap().boundaries(), bf);
    }

    #[test]
    fn calibration_reports_occupancy() {
        let pairs: Vec<(f64, f64)> = [1.0, 2.0, 10.0, 11.0, 20.0, 21.0, 30.0, 31.0]
            .iter()
            .map(|&v| (v, v * 2.0))
            .collect();
        let c = calibrate_thresholds(&pairs).unwrap();
        assert_eq!(c.med.boundaries, [6.0, 15.5, 25.5]);
        assert_eq!(c.lat.boundaries, [12.0, 31.0, 51.0]);
        assert_eq!(c.med.occupancy, [2, 2, 2, 2]);
        assert!(c.thresholds().is_ok());
    }

    #[test]
    fn calibration_needs_k_distinct() {
        assert!(matches!(
            optimal_partition(&[5.0; 10], 4),
            Err(Error::InsufficientDistinct { needed: 4, found: 1 })
        ));
        assert!(optimal_partition(&[1.0, 2.0, 3.0], 4).is_err());
    }

    proptest! {
        #[test]
        fn dp_equals_exhaustive(data in prop::collection::vec(0u32..40, 4..=12)) {
            let data: Vec<f64> = data.into_iter().map(f64::from).collect();
            let distinct = {
                let mut d = data.clone();
                d.sort_by(f64::total_cmp);
                d.dedup();
                d.len()
            };
            prop_assume!(distinct >= 4);
            let p = optimal_partition(&data, 4).unwrap();
            let (bf_cost, _) = brute_force(&data, 4);
            prop_assert!((p.cost - bf_cost).abs() <= 1e-9 * (1.0 + bf_cost));
        }

        #[test]
        fn grading_is_antitone(a in 0.0..40.0f64, b in 0.0..40.0f64) {
            let t = [8.0, 17.0, 23.0];
            if a <= b {
                prop_assert!(grade_jsn(a, &t).unwrap() >= grade_jsn(b, &t).unwrap());
            }
        }

        #[test]
        fn translation_and_gap_shift(dx in -20i64..20, dy in -30i64..30, extra in 0usize..10) {
            let base = |x: usize| {
                let apex = if x < 336 { 220 } else { 450 };
                400 - (x as i64 - apex).unsigned_abs().div_ceil(3) as usize
            };
            let measure = |shift_x: i64, shift_y: i64, add: usize| {
                let bottom = |x: usize| (base((x as i64 - shift_x) as usize) as i64 + shift_y) as usize;
                let upper = Mask::from_fn(N, N, |x, y| {
                    (60..610).contains(&(x as i64 - shift_x)) && y >= 100 && y <= bottom(x)
                });
                let lower = Mask::from_fn(N, N, |x, y| {
                    (60..610).contains(&(x as i64 - shift_x)) && y > bottom(x) + 18 + add && y < 620
                });
                let m = BoneMaskPair::new(upper, lower).unwrap();
                let lp = find_lowest_points(&m, 336).unwrap();
                let j = measure_jsd(&m, &lp, SideMap { medial: ImageSide::Left }).unwrap();
                (j.med_px, j.lat_px)
            };
            let (m0, l0) = measure(0, 0, 0);
            prop_assert_eq!(measure(dx, dy, 0), (m0, l0));
            let (m1, l1) = measure(0, 0, extra);
            prop_assert_eq!(m1 - m0, extra as f64);
            prop_assert_eq!(l1 - l0, extra as f64);
        }
    }
}
