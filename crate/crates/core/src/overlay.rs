//! Static RGB render of a graded study: bone contours, lowest points, the
//! measured gap lines and a text label per knee.

use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage};
use serde::Serialize;

use crate::detect::KneeSlot;
use crate::error::{Error, Result};
use crate::ingest::NormalizedImage;
use crate::jsd::GapLine;
use crate::pipeline::KneeArtifacts;
use crate::segment::Mask;

const UPPER: Rgb<u8> = Rgb([0, 200, 255]);
const LOWER: Rgb<u8> = Rgb([255, 200, 0]);
const MEDIAL: Rgb<u8> = Rgb([255, 40, 40]);
const LATERAL: Rgb<u8> = Rgb([40, 255, 40]);
const POINT: Rgb<u8> = Rgb([255, 0, 255]);
const TEXT: Rgb<u8> = Rgb([255, 255, 255]);
const TEXT_SCALE: i64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Annotation {
    Contour { slot: KneeSlot, bone: &'static str, pixels: usize },
    LowestPoint { slot: KneeSlot, compartment: &'static str, x: i64, y: i64 },
    MeasurementLine { slot: KneeSlot, compartment: &'static str, x: i64, y0: i64, y1: i64 },
    Label { slot: KneeSlot, text: String },
}

pub struct Overlay {
    pub image: RgbImage,
    pub annotations: Vec<Annotation>,
}

impl Overlay {
    pub fn line_count(&self, slot: KneeSlot, compartment: &str) -> usize {
        self.annotations
            .iter()
            .filter(|a| {
                matches!(a, Annotation::MeasurementLine { slot: s, compartment: c, .. }
                    if *s == slot && *c == compartment)
            })
            .count()
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.image
            .write_to(&mut buf, ImageFormat::Png)
            .map_err(|e| Error::Decode(e.to_string()))?;
        Ok(buf.into_inner())
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_contour(img: &mut RgbImage, mask: &Mask, origin: (i64, i64), c: Rgb<u8>) -> usize {
    let g = mask.grid();
    let mut n = 0;
    for y in 0..g.height() {
        for x in 0..g.width() {
            if !g.get(x, y) {
                continue;
            }
            let (xi, yi) = (x as i64, y as i64);
            let edge = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .any(|(dx, dy)| !g.get_signed(xi + dx, yi + dy).unwrap_or(false));
            if edge {
                put(img, origin.0 + xi, origin.1 + yi, c);
                n += 1;
            }
        }
    }
    n
}

/// 3×5 glyphs, one row per entry, high bit leftmost.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        'A' => [2, 5, 7, 5, 5],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'J' => [1, 1, 1, 5, 7],
        'K' => [5, 5, 6, 5, 5],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'N' => [6, 5, 5, 5, 5],
        'S' => [7, 4, 7, 1, 7],
        'T' => [7, 2, 2, 2, 2],
        '.' => [0, 0, 0, 0, 2],
        '/' => [1, 1, 2, 4, 4],
        '-' => [0, 0, 7, 0, 0],
        ' ' => [0, 0, 0, 0, 0],
        _ => return None,
    })
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str) {
    let mut cx = x;
    for ch in text.chars() {
        if let Some(rows) = glyph(ch.to_ascii_uppercase()) {
            for (r, bits) in rows.iter().enumerate() {
                for col in 0..3 {
                    if bits & (4 >> col) != 0 {
                        for sy in 0..TEXT_SCALE {
                            for sx in 0..TEXT_SCALE {
                                put(img, cx + col * TEXT_SCALE + sx, y + r as i64 * TEXT_SCALE + sy, TEXT);
                            }
                        }
                    }
                }
            }
        }
        cx += 4 * TEXT_SCALE;
    }
}

fn draw_lines(
    img: &mut RgbImage,
    out: &mut Vec<Annotation>,
    k: &KneeArtifacts,
    lines: &[GapLine],
    compartment: &'static str,
    c: Rgb<u8>,
) {
    for l in lines {
        let x = k.origin.0 + l.column as i64;
        let (y0, y1) = (k.origin.1 + l.upper_row as i64 + 1, k.origin.1 + l.lower_row as i64 - 1);
        for y in y0..=y1 {
            put(img, x, y, c);
        }
        out.push(Annotation::MeasurementLine {
            slot: k.slot,
            compartment,
            x,
            y0,
            y1,
        });
    }
}

pub fn knee_label(k: &KneeArtifacts) -> String {
    let jsn = k.assessment.jsn.map_or("-/-".to_string(), |j| format!("{}/{}", j.med, j.lat));
    format!(
        "KL {}  MED {:.2}MM  LAT {:.2}MM  JSN {}",
        k.assessment.kl_grade, k.jsd.med_mm, k.jsd.lat_mm, jsn
    )
}

pub fn render(img: &NormalizedImage, knees: &[KneeArtifacts]) -> Overlay {
    let src = img.pixels();
    let mut out = RgbImage::from_fn(src.width() as u32, src.height() as u32, |x, y| {
        let v = (f64::from(src.get(x as usize, y as usize)) * 255.0).round() as u8;
        Rgb([v, v, v])
    });
    let mut ann = Vec::new();
    for k in knees {
        for (mask, bone, c) in [(&k.masks.upper, "upper", UPPER), (&k.masks.lower, "lower", LOWER)] {
            let pixels = draw_contour(&mut out, mask, k.origin, c);
            ann.push(Annotation::Contour {
                slot: k.slot,
                bone,
                pixels,
            });
        }
        draw_lines(&mut out, &mut ann, k, &k.jsd.med_lines, "medial", MEDIAL);
        draw_lines(&mut out, &mut ann, k, &k.jsd.lat_lines, "lateral", LATERAL);
        for (p, compartment) in [(k.jsd.lowest_med, "medial"), (k.jsd.lowest_lat, "lateral")] {
            let (x, y) = (k.origin.0 + p.x as i64, k.origin.1 + p.y as i64);
            for dy in -2..=2 {
                for dx in -2..=2 {
                    put(&mut out, x + dx, y + dy, POINT);
                }
            }
            ann.push(Annotation::LowestPoint {
                slot: k.slot,
                compartment,
                x,
                y,
            });
        }
        let text = knee_label(k);
        let top = k.masks.upper.grid();
        let first_row = (0..top.height())
            .find(|&y| top.row(y).iter().any(|&b| b))
            .unwrap_or(0) as i64;
        let ty = (k.origin.1 + first_row - 8 * TEXT_SCALE).max(0);
        let tx = (k.origin.0 + top.width() as i64 / 2 - text.len() as i64 * 2 * TEXT_SCALE).max(0);
        draw_text(&mut out, tx, ty, &text);
        ann.push(Annotation::Label { slot: k.slot, text });
    }
    Overlay {
        image: out,
        annotations: ann,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::ConstantClassifier;
    use crate::fuse::{train_forest, FeatureVector, ForestParams};
    use crate::phantom::{emit_backend_fixtures, generate, CondyleShape, PhantomKnee, PhantomSpec};
    use crate::pipeline::{grade_study, Backends, FileDetector, PipelineConfig};
    use crate::segment::FileSegmenter;

    #[test]
    fn annotations_follow_the_measurement() {
        let spec = PhantomSpec::bilateral(
            "ov",
            0,
            PhantomKnee::new([350, 450], 16, 22, CondyleShape::Flat),
            PhantomKnee::new([1050, 450], 10, 24, CondyleShape::Vee),
        );
        let (img, truth) = generate(&spec).unwrap();
        let (masks, dets) = emit_backend_fixtures(&truth);
        let det = FileDetector::new(dets, "d");
        let seg = FileSegmenter::new(masks, "m");
        let cls = ConstantClassifier::uniform();
        let rows: Vec<_> = (0..10)
            .map(|i| (FeatureVector::new([0.2; 5].into_iter().chain([i as f64, 1.0]).collect::<Vec<_>>().try_into().unwrap()).unwrap(), 2u8))
            .collect();
        let model = train_forest(&rows, ForestParams { n_trees: 3, ..ForestParams::default() }).unwrap();
        let backends = Backends {
            detector: &det,
            classifier: &cls,
            segmenter: &seg,
        };
        let r = grade_study(&img, &backends, &model, &PipelineConfig::default()).unwrap();
        let ov = render(&img, &r.artifacts);
        for k in &r.artifacts {
            assert_eq!(ov.line_count(k.slot, "medial"), k.jsd.valid_line_count_med());
            assert_eq!(ov.line_count(k.slot, "lateral"), k.jsd.valid_line_count_lat());
        }
        assert_eq!(ov.image.width(), 1400);
        let png = ov.to_png().unwrap();
        assert_eq!(&png[1..4], b"PNG");
        assert_eq!(png, render(&img, &r.artifacts).to_png().unwrap());
        assert!(matches!(&ov.annotations.last().unwrap(), Annotation::Label { text, .. } if text.starts_with("KL 2")));
    }

    #[test]
    fn every_label_character_has_a_glyph() {
        for c in "KL 0123456789 MED LAT JSN MM ./-".chars() {
            assert!(glyph(c).is_some(), "{c}");
        }
    }
}
