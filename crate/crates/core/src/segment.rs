//! Inference-time enhancement, bone-mask backends, mask cleaning and Dice.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classify::RoiPatch;
use crate::detect::KneeSlot;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::process::{ExternalProcess, PatchRequest};

pub const GAMMA_MIN: f64 = 1.0;
pub const GAMMA_MAX: f64 = 3.0;
/// Side of the square sampled above the joint to adapt gamma.
pub const GAMMA_BOX: usize = 50;
/// Gap between the sampling box's bottom edge and the joint center row.
pub const GAMMA_BOX_OFFSET: usize = 10;
const UNLABELED: u32 = u32::MAX;
pub const DEFAULT_SHARPEN_RATIO: f64 = 0.3;

/// Binary mask; `true` marks bone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask(Grid<bool>);

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self(Grid::filled(width, height, false))
    }

    pub fn from_fn(width: usize, height: usize, f: impl FnMut(usize, usize) -> bool) -> Self {
        Self(Grid::from_fn(width, height, f))
    }

    pub fn from_grid(grid: Grid<bool>) -> Self {
        Self(grid)
    }

    pub fn grid(&self) -> &Grid<bool> {
        &self.0
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.0.get(x, y)
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.0.set(x, y, v)
    }

    pub fn count(&self) -> usize {
        self.0.data().iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.0.data().iter().any(|&b| b)
    }

    /// Mean (x, y) of set pixels.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut n, mut sx, mut sy) = (0usize, 0f64, 0f64);
        for y in 0..self.height() {
            for x in 0..self.width() {
                if self.get(x, y) {
                    n += 1;
                    sx += x as f64;
                    sy += y as f64;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.0
            .data()
            .iter()
            .zip(other.0.data())
            .filter(|(a, b)| **a && **b)
            .count()
    }

    /// Labels 4-connected components of pixels equal to `value`.
    fn components(&self, value: bool) -> (Vec<u32>, Vec<usize>) {
        let (w, h) = (self.width(), self.height());
        let data = self.0.data();
        let mut labels = vec![UNLABELED; w * h];
        let mut sizes = Vec::new();
        let mut stack = Vec::new();
        for start in 0..w * h {
            if data[start] != value || labels[start] != UNLABELED {
                continue;
            }
            let id = sizes.len() as u32;
            let mut size = 0;
            labels[start] = id;
            stack.push(start);
            while let Some(i) = stack.pop() {
                size += 1;
                let (x, y) = (i % w, i / w);
                for (ok, j) in [(x > 0, i.wrapping_sub(1)), (x + 1 < w, i + 1), (y > 0, i.wrapping_sub(w)), (y + 1 < h, i + w)] {
                    if ok && data[j] == value && labels[j] == UNLABELED {
                        labels[j] = id;
                        stack.push(j);
                    }
                }
            }
            sizes.push(size);
        }
        (labels, sizes)
    }

    /// Keeps only the largest 4-connected component (first in scan order on ties).
    pub fn largest_component(&self) -> Mask {
        let (labels, sizes) = self.components(true);
        let Some(best) = (0..sizes.len()).max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
        else {
            return self.clone();
        };
        let data = labels.iter().map(|&l| l as usize == best).collect();
        Mask(Grid::from_vec(self.width(), self.height(), data).expect("same shape"))
    }

    /// Fills background regions not 4-connected to the border.
    pub fn fill_holes(&self) -> Mask {
        let (w, h) = (self.width(), self.height());
        let (labels, sizes) = self.components(false);
        let mut touches_border = vec![false; sizes.len()];
        for y in 0..h {
            for x in 0..w {
                if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                    let l = labels[y * w + x];
                    if l != UNLABELED {
                        touches_border[l as usize] = true;
                    }
                }
            }
        }
        let data = self
            .0
            .data()
            .iter()
            .zip(&labels)
            .map(|(&v, &l)| v || !touches_border[l as usize])
            .collect();
        Mask(Grid::from_vec(w, h, data).expect("same shape"))
    }

    pub fn minus(&self, other: &Mask) -> Mask {
        let data = self
            .0
            .data()
            .iter()
            .zip(other.0.data())
            .map(|(&a, &b)| a && !b)
            .collect();
        Mask(Grid::from_vec(self.width(), self.height(), data).expect("same shape"))
    }

    /// Run lengths over the row-major scan, alternating unset/set, starting unset.
    pub fn to_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &v in self.0.data() {
            if v == current {
                len += 1;
            } else {
                runs.push(len);
                current = v;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_rle(width: usize, height: usize, runs: &[u32]) -> Result<Mask> {
        let total: u64 = runs.iter().map(|&r| u64::from(r)).sum();
        if total != (width * height) as u64 {
            return Err(Error::MaskShape(format!(
                "run lengths cover {total} pixels, mask has {}",
                width * height
            )));
        }
        let mut data = Vec::with_capacity(width * height);
        for (i, &r) in runs.iter().enumerate() {
            data.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
        }
        Ok(Mask(Grid::from_vec(width, height, data).expect("length checked")))
    }
}

/// Femur (`upper`) and tibia+fibula (`lower`) masks over the same patch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoneMaskPair {
    pub upper: Mask,
    pub lower: Mask,
}

impl BoneMaskPair {
    pub fn new(upper: Mask, lower: Mask) -> Result<Self> {
        if upper.width() != lower.width() || upper.height() != lower.height() {
            return Err(Error::MaskShape(format!(
                "upper {}x{} vs lower {}x{}",
                upper.width(),
                upper.height(),
                lower.width(),
                lower.height()
            )));
        }
        Ok(Self { upper, lower })
    }

    pub fn width(&self) -> usize {
        self.upper.width()
    }

    pub fn height(&self) -> usize {
        self.upper.height()
    }
}

/// Mean intensity of the 50×50 box whose bottom edge sits 10 px above the
/// joint center, clipped to the patch. `None` if the box is fully clipped.
pub fn gamma_box_mean(roi: &RoiPatch) -> Option<f64> {
    let (cx, cy) = roi.joint_center_in_patch;
    let g = &roi.pixels_full;
    let y1 = cy as i64 - GAMMA_BOX_OFFSET as i64; // exclusive
    let y0 = y1 - GAMMA_BOX as i64;
    let x0 = cx as i64 - (GAMMA_BOX / 2) as i64;
    let x1 = x0 + GAMMA_BOX as i64;
    let (mut n, mut sum) = (0usize, 0f64);
    for y in y0.max(0)..y1.min(g.height() as i64) {
        for x in x0.max(0)..x1.min(g.width() as i64) {
            sum += f64::from(g.get(x as usize, y as usize));
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// γ = clamp(ln 0.5 / ln m, 1, 3) for 0 < m < 1, otherwise 1.
pub fn gamma_from_mean(m: f64) -> f64 {
    if m > 0.0 && m < 1.0 {
        (0.5f64.ln() / m.ln()).clamp(GAMMA_MIN, GAMMA_MAX)
    } else {
        1.0
    }
}

pub fn apply_gamma(roi: &RoiPatch, gamma: f64) -> RoiPatch {
    if gamma == 1.0 {
        return roi.clone();
    }
    let g = gamma as f32;
    roi.with_full(roi.pixels_full.map(|v| v.powf(g)))
}

/// Gamma correction adapted to the intensity just above the joint.
pub fn adaptive_gamma(roi: &RoiPatch) -> (RoiPatch, f64) {
    let gamma = gamma_box_mean(roi).map_or(1.0, gamma_from_mean);
    (apply_gamma(roi, gamma), gamma)
}

/// `clamp(in - ratio * (L ⊛ in), 0, 1)` with the 4-neighbor Laplacian and replicate borders.
pub fn sharpen_grid(src: &Grid<f32>, ratio: f64) -> Result<Grid<f32>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidRatio(ratio));
    }
    if ratio == 0.0 {
        return Ok(src.clone());
    }
    let (w, h) = (src.width(), src.height());
    let d = src.data();
    Ok(Grid::from_fn(w, h, |x, y| {
        let row = y * w;
        let up = y.saturating_sub(1) * w;
        let down = (y + 1).min(h - 1) * w;
        let c = f64::from(d[row + x]);
        let lap = f64::from(d[row + x.saturating_sub(1)])
            + f64::from(d[row + (x + 1).min(w - 1)])
            + f64::from(d[up + x])
            + f64::from(d[down + x])
            - 4.0 * c;
        (c - ratio * lap).clamp(0.0, 1.0) as f32
    }))
}

pub fn laplacian_sharpen(roi: &RoiPatch, ratio: f64) -> Result<RoiPatch> {
    Ok(roi.with_full(sharpen_grid(&roi.pixels_full, ratio)?))
}

/// Cleans raw backend masks.
///
/// The upper mask keeps its largest 4-connected component with holes filled.
/// The lower mask loses any overlap with the upper mask (femur priority), is
/// cleaned the same way, and loses the overlap again. Fails on an empty mask
/// or when the lower centroid is not below the upper centroid.
pub fn postprocess(raw: &BoneMaskPair) -> Result<BoneMaskPair> {
    let upper = raw.upper.largest_component().fill_holes();
    if upper.is_empty() {
        return Err(Error::EmptyMask("upper"));
    }
    let filled = raw.lower.minus(&upper).largest_component().fill_holes();
    // Filling can only reach into the upper mask through a hole; without
    // overlap the filled component is still connected.
    let lower = if filled.intersection_count(&upper) == 0 {
        filled
    } else {
        filled.minus(&upper).largest_component()
    };
    if lower.is_empty() {
        return Err(Error::EmptyMask("lower"));
    }
    let (_, uy) = upper.centroid().expect("non-empty");
    let (_, ly) = lower.centroid().expect("non-empty");
    if uy >= ly {
        return Err(Error::CentroidOrder);
    }
    BoneMaskPair::new(upper, lower)
}

/// 2|a∩b| / (|a|+|b|); 1 when both are empty.
pub fn dice(a: &Mask, b: &Mask) -> f64 {
    let total = a.count() + b.count();
    if total == 0 {
        return 1.0;
    }
    2.0 * a.intersection_count(b) as f64 / total as f64
}

/// |a∩b| / |a∪b|; 1 when both are empty.
pub fn mask_iou(a: &Mask, b: &Mask) -> f64 {
    let inter = a.intersection_count(b);
    let union = a.count() + b.count() - inter;
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

/// Source of raw bone masks in the frame of the requested patch.
pub trait SegmentationBackend: Send + Sync {
    fn id(&self) -> String;
    fn raw_masks(&self, roi: &RoiPatch, source_id: &str, knee: KneeSlot) -> Result<BoneMaskPair>;
}

/// Backend masks followed by [`postprocess`]. The patch should already be enhanced.
pub fn segment(
    backend: &dyn SegmentationBackend,
    roi: &RoiPatch,
    source_id: &str,
    knee: KneeSlot,
) -> Result<BoneMaskPair> {
    postprocess(&backend.raw_masks(roi, source_id, knee)?)
}

/// Run-length-encoded mask pair as stored in a mask document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub width: usize,
    pub height: usize,
    /// Image coordinates of the masks' top-left pixel.
    pub origin: [i64; 2],
    pub upper: Vec<u32>,
    pub lower: Vec<u32>,
}

impl MaskRecord {
    pub fn encode(masks: &BoneMaskPair, origin: (i64, i64)) -> Self {
        Self {
            width: masks.width(),
            height: masks.height(),
            origin: [origin.0, origin.1],
            upper: masks.upper.to_rle(),
            lower: masks.lower.to_rle(),
        }
    }

    pub fn decode(&self) -> Result<BoneMaskPair> {
        BoneMaskPair::new(
            Mask::from_rle(self.width, self.height, &self.upper)?,
            Mask::from_rle(self.width, self.height, &self.lower)?,
        )
    }
}

/// Mask document: source id → knee slot → mask pair.
pub type MaskDocument = BTreeMap<String, BTreeMap<KneeSlot, MaskRecord>>;

/// Re-frames masks stored at `from` into a patch of the same size at `to`.
pub fn reframe(masks: &BoneMaskPair, from: (i64, i64), to: (i64, i64)) -> BoneMaskPair {
    if from == to {
        return masks.clone();
    }
    let (w, h) = (masks.width(), masks.height());
    let (dx, dy) = (to.0 - from.0, to.1 - from.1);
    let shift = |m: &Mask| {
        Mask::from_fn(w, h, |x, y| {
            m.grid().get_signed(x as i64 + dx, y as i64 + dy).unwrap_or(false)
        })
    };
    BoneMaskPair {
        upper: shift(&masks.upper),
        lower: shift(&masks.lower),
    }
}

#[derive(Debug, Clone)]
pub struct FileSegmenter {
    doc: MaskDocument,
    label: String,
}

impl FileSegmenter {
    pub fn new(doc: MaskDocument, label: impl Into<String>) -> Self {
        Self {
            doc,
            label: label.into(),
        }
    }

    pub fn from_json(text: &str, label: impl Into<String>) -> Result<Self> {
        Ok(Self::new(serde_json::from_str(text)?, label))
    }
}

impl SegmentationBackend for FileSegmenter {
    fn id(&self) -> String {
        format!("file:{}", self.label)
    }

    fn raw_masks(&self, roi: &RoiPatch, source_id: &str, knee: KneeSlot) -> Result<BoneMaskPair> {
        let rec = self
            .doc
            .get(source_id)
            .and_then(|m| m.get(&knee))
            .ok_or_else(|| Error::LookupMiss {
                source_id: source_id.to_string(),
                knee_side: knee.to_string(),
            })?;
        if rec.width != roi.pixels_full.width() || rec.height != roi.pixels_full.height() {
            return Err(Error::MaskShape(format!(
                "stored {}x{} masks for a {}x{} patch",
                rec.width,
                rec.height,
                roi.pixels_full.width(),
                roi.pixels_full.height()
            )));
        }
        let masks = rec.decode()?;
        Ok(reframe(&masks, (rec.origin[0], rec.origin[1]), roi.origin))
    }
}

#[derive(Deserialize)]
struct MaskReply {
    upper: Vec<u32>,
    lower: Vec<u32>,
}

/// Streams the enhanced 672×672 patch to a child process; the reply is a JSON
/// line `{"upper": [runs], "lower": [runs]}` in patch coordinates.
pub struct ExternalSegmenter(ExternalProcess);

impl ExternalSegmenter {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        ExternalProcess::spawn(program, args).map(Self)
    }
}

impl SegmentationBackend for ExternalSegmenter {
    fn id(&self) -> String {
        format!("process:{}", self.0.describe())
    }

    fn raw_masks(&self, roi: &RoiPatch, source_id: &str, knee: KneeSlot) -> Result<BoneMaskPair> {
        let reply = self
            .0
            .request(&PatchRequest::new(source_id, knee.as_str(), &roi.pixels_full))?;
        let r: MaskReply = serde_json::from_str(&reply)
            .map_err(|e| Error::Backend(format!("bad mask reply: {e}")))?;
        let (w, h) = (roi.pixels_full.width(), roi.pixels_full.height());
        BoneMaskPair::new(Mask::from_rle(w, h, &r.upper)?, Mask::from_rle(w, h, &r.lower)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::ROI_SIZE;
    use proptest::prelude::*;

    fn rect(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Mask {
        Mask::from_fn(w, h, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    fn roi_with(f: impl FnMut(usize, usize) -> f32) -> RoiPatch {
        RoiPatch::from_full(Grid::from_fn(ROI_SIZE, ROI_SIZE, f), (0, 0), 0.0)
    }

    #[test]
    fn gamma_fixed_point_and_clamp() {
        assert_eq!(gamma_from_mean(0.5), 1.0);
        let g = gamma_from_mean(0.7);
        assert!((g - 1.943_358_5).abs() < 1e-6, "{g}");
        assert!((0.7f64.powf(g) - 0.5).abs() < 1e-12);
        let raw = 0.5f64.ln() / 0.95f64.ln();
        assert!((raw - 13.513).abs() < 1e-3);
        assert_eq!(gamma_from_mean(0.95), 3.0);
        assert_eq!(gamma_from_mean(0.2), 1.0);
        assert_eq!(gamma_from_mean(0.0), 1.0);
        assert_eq!(gamma_from_mean(1.0), 1.0);
    }

    #[test]
    fn gamma_box_sits_above_joint() {
        // 0.7 inside rows 276..326 / cols 311..361, 0.1 elsewhere.
        let roi = roi_with(|x, y| {
            if (276..326).contains(&y) && (311..361).contains(&x) {
                0.7
            } else {
                0.1
            }
        });
        let m = gamma_box_mean(&roi).unwrap();
        assert!((m - 0.7).abs() < 1e-6);
        let (out, g) = adaptive_gamma(&roi);
        assert!((g - gamma_from_mean(m)).abs() < 1e-12);
        assert!((out.pixels_full.get(330, 300) - 0.5).abs() < 1e-5);
    }

    #[test]
    fn mid_gray_leaves_image_unchanged() {
        let roi = roi_with(|x, y| if y < 330 { 0.5 } else { (x % 7) as f32 / 7.0 });
        let (out, g) = adaptive_gamma(&roi);
        assert_eq!(g, 1.0);
        assert_eq!(out, roi);
    }

    #[test]
    fn sharpen_constant_is_identity() {
        let g = Grid::filled(9, 9, 0.37f32);
        assert_eq!(sharpen_grid(&g, 0.3).unwrap(), g);
    }

    #[test]
    fn sharpen_single_spike() {
        // Hand convolution on 5x5: center L = -4, 4-neighbors L = +1, rest 0.
        let g = Grid::from_fn(5, 5, |x, y| if (x, y) == (2, 2) { 1.0f32 } else { 0.0 });
        let out = sharpen_grid(&g, 0.3).unwrap();
        assert_eq!(out.get(2, 2), 1.0);
        for (x, y) in [(1, 2), (3, 2), (2, 1), (2, 3)] {
            assert_eq!(out.get(x, y), 0.0);
        }
        // A darker spike shows the raw arithmetic: 0.2 + 0.3 * 0.8 = 0.44.
        let g = Grid::from_fn(5, 5, |x, y| if (x, y) == (2, 2) { 0.2f32 } else { 0.0 });
        let out = sharpen_grid(&g, 0.3).unwrap();
        assert!((out.get(2, 2) - 0.44).abs() < 1e-6);
    }

    #[test]
    fn sharpen_ratio_bounds() {
        let g = Grid::from_fn(5, 5, |x, _| x as f32 / 4.0);
        assert_eq!(sharpen_grid(&g, 0.0).unwrap(), g);
        assert!(matches!(sharpen_grid(&g, 1.5), Err(Error::InvalidRatio(_))));
        assert!(sharpen_grid(&g, -0.1).is_err());
    }

    #[test]
    fn postprocess_removes_small_components_and_fills_holes() {
        let mut upper = rect(100, 100, 10, 10, 90, 60);
        upper.set(50, 30, false); // enclosed hole
        upper.set(95, 95, true); // stray blob
        let lower = rect(100, 100, 10, 70, 90, 95);
        let out = postprocess(&BoneMaskPair::new(upper, lower.clone()).unwrap()).unwrap();
        assert!(out.upper.get(50, 30));
        assert!(!out.upper.get(95, 95));
        assert_eq!(out.upper, rect(100, 100, 10, 10, 90, 60));
        assert_eq!(out.lower, lower);
    }

    #[test]
    fn postprocess_keeps_larger_of_two_components() {
        let big = rect(200, 200, 0, 0, 100, 40); // 4000 px
        let small = rect(200, 200, 150, 0, 153, 4); // 12 px
        let upper = Mask::from_fn(200, 200, |x, y| big.get(x, y) || small.get(x, y));
        let lower = rect(200, 200, 0, 100, 100, 150);
        let out = postprocess(&BoneMaskPair::new(upper, lower).unwrap()).unwrap();
        assert_eq!(out.upper, big);
    }

    #[test]
    fn overlap_goes_to_upper() {
        let upper = rect(50, 50, 0, 0, 50, 30);
        let lower = rect(50, 50, 0, 25, 50, 50);
        let out = postprocess(&BoneMaskPair::new(upper.clone(), lower).unwrap()).unwrap();
        assert_eq!(out.upper, upper);
        assert_eq!(out.lower, rect(50, 50, 0, 30, 50, 50));
        assert_eq!(out.upper.intersection_count(&out.lower), 0);
    }

    #[test]
    fn postprocess_errors() {
        let upper = rect(50, 50, 0, 30, 50, 40);
        let lower = rect(50, 50, 0, 0, 50, 10);
        assert!(matches!(
            postprocess(&BoneMaskPair::new(upper.clone(), lower).unwrap()),
            Err(Error::CentroidOrder)
        ));
        assert!(matches!(
            postprocess(&BoneMaskPair::new(upper.clone(), Mask::empty(50, 50)).unwrap()),
            Err(Error::EmptyMask("lower"))
        ));
        assert!(matches!(
            postprocess(&BoneMaskPair::new(Mask::empty(50, 50), upper).unwrap()),
            Err(Error::EmptyMask("upper"))
        ));
    }

    #[test]
    fn dice_cases() {
        let a = rect(10, 10, 0, 0, 2, 2);
        let b = rect(10, 10, 1, 0, 3, 2);
        let far = rect(10, 10, 7, 7, 9, 9);
        assert_eq!(dice(&a, &a), 1.0);
        assert_eq!(dice(&a, &far), 0.0);
        assert_eq!(dice(&a, &b), 0.5);
        assert_eq!(dice(&Mask::empty(3, 3), &Mask::empty(3, 3)), 1.0);
    }

    #[test]
    fn rle_rejects_wrong_length() {
        assert!(Mask::from_rle(4, 4, &[3, 2]).is_err());
        let m = Mask::from_rle(4, 4, &[0, 16]).unwrap();
        assert_eq!(m.count(), 16);
    }

    #[test]
    fn file_backend_reframes_and_cleans() {
        let mut upper = rect(ROI_SIZE, ROI_SIZE, 100, 100, 500, 320);
        for (x, y) in [(300, 200), (301, 200), (302, 200)] {
            upper.set(x, y, false); // 3-px hole
        }
        let lower = rect(ROI_SIZE, ROI_SIZE, 100, 345, 500, 600);
        let masks = BoneMaskPair::new(upper, lower).unwrap();
        let mut doc = MaskDocument::new();
        doc.entry("s".into())
            .or_default()
            .insert(KneeSlot::Left, MaskRecord::encode(&masks, (10, 20)));
        let backend = FileSegmenter::new(doc, "m");

        let roi = RoiPatch::from_full(Grid::filled(ROI_SIZE, ROI_SIZE, 0.0), (10, 20), 0.0);
        let out = segment(&backend, &roi, "s", KneeSlot::Left).unwrap();
        assert!(out.upper.get(301, 200));
        assert_eq!(out.upper, rect(ROI_SIZE, ROI_SIZE, 100, 100, 500, 320));

        // Patch shifted 5 px right: content moves 5 px left.
        let roi = RoiPatch::from_full(Grid::filled(ROI_SIZE, ROI_SIZE, 0.0), (15, 20), 0.0);
        let out = backend.raw_masks(&roi, "s", KneeSlot::Left).unwrap();
        assert!(out.upper.get(95, 150) && !out.upper.get(495, 150));

        assert!(matches!(
            backend.raw_masks(&roi, "s", KneeSlot::Right),
            Err(Error::LookupMiss { .. })
        ));
    }

    #[cfg(unix)]
    #[test]
    fn external_segmenter_round_trip() {
        let masks = BoneMaskPair::new(
            rect(ROI_SIZE, ROI_SIZE, 0, 0, ROI_SIZE, 300),
            rect(ROI_SIZE, ROI_SIZE, 0, 330, ROI_SIZE, ROI_SIZE),
        )
        .unwrap();
        let reply = format!(
            r#"{{"upper": {:?}, "lower": {:?}}}"#,
            masks.upper.to_rle(),
            masks.lower.to_rle()
        );
        let script = format!("while read line; do echo '{reply}'; done");
        let backend = ExternalSegmenter::spawn("sh", &["-c".into(), script]).unwrap();
        let roi = RoiPatch::from_full(Grid::filled(ROI_SIZE, ROI_SIZE, 0.5), (0, 0), 0.0);
        assert_eq!(segment(&backend, &roi, "x", KneeSlot::Left).unwrap(), masks);
    }

    fn arb_mask(w: usize, h: usize) -> impl Strategy<Value = Mask> {
        prop::collection::vec(any::<bool>(), w * h)
            .prop_map(move |v| Mask::from_grid(Grid::from_vec(w, h, v).unwrap()))
    }

    proptest! {
        #[test]
        fn dice_matches_iou_identity(a in arb_mask(8, 7), b in arb_mask(8, 7)) {
            let d = dice(&a, &b);
            prop_assert_eq!(d, dice(&b, &a));
            let j = mask_iou(&a, &b);
            prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
        }

        #[test]
        fn rle_round_trips(m in arb_mask(9, 6)) {
            prop_assert_eq!(Mask::from_rle(9, 6, &m.to_rle()).unwrap(), m);
        }

        #[test]
        fn postprocess_is_idempotent(u in arb_mask(12, 12), l in arb_mask(12, 12)) {
            let pair = BoneMaskPair::new(u, l).unwrap();
            if let Ok(once) = postprocess(&pair) {
                prop_assert_eq!(postprocess(&once).unwrap(), once);
            }
        }

        #[test]
        fn gamma_is_monotone_with_fixed_ends(m in 0.01..0.99f64, a in 0.0..1.0f64, b in 0.0..1.0f64) {
            let g = gamma_from_mean(m);
            prop_assert!((GAMMA_MIN..=GAMMA_MAX).contains(&g));
            let f = |v: f64| v.powf(g);
            prop_assert_eq!(f(0.0), 0.0);
            prop_assert_eq!(f(1.0), 1.0);
            if a <= b { prop_assert!(f(a) <= f(b)); }
        }
    }
}
