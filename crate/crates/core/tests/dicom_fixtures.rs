use std::fs;
use std::path::PathBuf;

use koa_core::ingest::{parse_dicom, parse_portable, Sidecar};
use koa_core::{Error, Laterality};
use serde_json::Value;

fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/dicom")
}

fn manifest() -> Vec<Value> {
    let text = fs::read_to_string(dir().join("manifest.json")).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    v["fixtures"].as_array().unwrap().clone()
}

fn error_name(e: &Error) -> &'static str {
    match e {
        Error::UnsupportedTransferSyntax(_) => "UnsupportedTransferSyntax",
        Error::MissingRequiredTag(_) => "MissingRequiredTag",
        Error::MalformedElement { .. } => "MalformedElement",
        Error::UnsupportedPixelFormat(_) => "UnsupportedPixelFormat",
        Error::NotGrayscale => "NotGrayscale",
        Error::InvalidImage(_) => "InvalidImage",
        _ => "other",
    }
}

fn laterality_name(l: Laterality) -> &'static str {
    match l {
        Laterality::Bilateral => "bilateral",
        Laterality::Left => "left",
        Laterality::Right => "right",
        Laterality::Unknown => "unknown",
    }
}

#[test]
fn manifest_lists_ten_fixtures() {
    assert_eq!(manifest().len(), 10);
}

#[test]
fn every_fixture_matches_its_manifest() {
    for f in manifest() {
        let name = f["file"].as_str().unwrap();
        let bytes = fs::read(dir().join(name)).unwrap();
        let parsed = parse_dicom(&bytes);
        match f["expect"].as_str().unwrap() {
            "ok" => {
                let img = parsed.unwrap_or_else(|e| panic!("{name}: {e}"));
                assert_eq!(img.width() as u64, f["width"].as_u64().unwrap(), "{name}");
                assert_eq!(img.height() as u64, f["height"].as_u64().unwrap(), "{name}");
                assert_eq!(u64::from(img.bit_depth()), f["bit_depth"].as_u64().unwrap(), "{name}");
                assert_eq!(img.spacing().row_mm, f["row_mm"].as_f64().unwrap(), "{name}");
                assert_eq!(img.spacing().col_mm, f["col_mm"].as_f64().unwrap(), "{name}");
                assert_eq!(laterality_name(img.laterality()), f["laterality"], "{name}");
                assert_eq!(img.source_id(), f["source_id"], "{name}");
                let data = img.pixels().data();
                let sum: u64 = data.iter().map(|&v| u64::from(v)).sum();
                assert_eq!(sum, f["pixel_sum"].as_u64().unwrap(), "{name}");
                let first: Vec<u64> = data[..4].iter().map(|&v| u64::from(v)).collect();
                let want: Vec<u64> = f["first_pixels"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
                assert_eq!(first, want, "{name}");
                assert_eq!(u64::from(*data.last().unwrap()), f["last_pixel"].as_u64().unwrap(), "{name}");
            }
            "error" => {
                let e = parsed.err().unwrap_or_else(|| panic!("{name} parsed but should fail"));
                assert_eq!(error_name(&e), f["error"], "{name}: {e}");
                if let Some(detail) = f["detail"].as_str() {
                    assert!(e.to_string().contains(detail), "{name}: {e}");
                }
            }
            other => panic!("unknown expectation {other}"),
        }
    }
}

#[test]
fn spacing_is_echoed_from_the_embedded_tag() {
    let img = parse_dicom(&fs::read(dir().join("explicit_le_16bit.dcm")).unwrap()).unwrap();
    assert_eq!(img.spacing().row_mm, 0.143);
    assert_eq!(img.width(), 128);
}

#[test]
fn dicom_and_portable_twins_agree() {
    let dicom = parse_dicom(&fs::read(dir().join("explicit_le_16bit.dcm")).unwrap()).unwrap();
    let sidecar = Sidecar::from_json(&fs::read_to_string(dir().join("explicit_le_16bit.json")).unwrap()).unwrap();
    let portable = parse_portable(&fs::read(dir().join("explicit_le_16bit.pgm")).unwrap(), &sidecar).unwrap();
    assert_eq!(dicom, portable);
}

#[test]
fn truncating_a_valid_file_never_panics() {
    let bytes = fs::read(dir().join("explicit_le_8bit.dcm")).unwrap();
    for cut in (0..bytes.len()).step_by(7) {
        let _ = parse_dicom(&bytes[..cut]);
    }
}
