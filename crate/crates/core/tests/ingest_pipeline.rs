use koa_core::ingest::{encode_pgm, normalize, parse_portable, preprocess, resample_to_standard, Sidecar};
use koa_core::{Grid, Laterality, PixelSpacing, RawRadiograph};
use proptest::prelude::*;

fn raw(w: usize, h: usize, spacing: PixelSpacing, f: impl Fn(usize, usize) -> u16) -> RawRadiograph {
    RawRadiograph::new(Grid::from_fn(w, h, f), 16, spacing, Laterality::Left, "p").unwrap()
}

#[test]
fn standard_spacing_passes_through_untouched() {
    let img = raw(70, 80, PixelSpacing::isotropic(0.2), |x, y| (x * 100 + y) as u16);
    assert_eq!(resample_to_standard(&img).unwrap(), img);
}

#[test]
fn pgm_round_trip_preserves_pixels() {
    let img = raw(65, 66, PixelSpacing::isotropic(0.2), |x, y| (x * 977 + y * 31) as u16);
    let back = parse_portable(&encode_pgm(&img), &Sidecar::new(0.2, Laterality::Left, "p")).unwrap();
    assert_eq!(back, img);
}

#[test]
fn preprocess_is_resample_then_normalize() {
    let img = raw(100, 90, PixelSpacing { row_mm: 0.15, col_mm: 0.25 }, |x, y| ((x * 13 + y * 7) % 3000) as u16);
    let a = preprocess(&img).unwrap();
    let b = normalize(&resample_to_standard(&img).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.width(), a.height()), (125, 68));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn constant_images_stay_constant(v in 0u16..=65535, sx in 0.1f64..0.4, sy in 0.1f64..0.4) {
        let w = ((64.0 * 0.2 / sx).ceil() as usize + 2).max(64);
        let h = ((64.0 * 0.2 / sy).ceil() as usize + 2).max(64);
        let img = raw(w, h, PixelSpacing { row_mm: sy, col_mm: sx }, |_, _| v);
        let out = resample_to_standard(&img).unwrap();
        prop_assert!(out.spacing().is_standard());
        prop_assert!(out.pixels().data().iter().all(|&p| p == v));
    }

    #[test]
    fn normalized_pixels_are_in_unit_range(seed in 0u64..1000) {
        let img = raw(64, 64, PixelSpacing::isotropic(0.2), |x, y| ((x as u64 * 7919 + y as u64 * 104729 + seed * 31) % 65536) as u16);
        let n = normalize(&img).unwrap();
        prop_assert!(n.pixels().data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}
