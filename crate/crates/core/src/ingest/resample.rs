use super::{max_intensity, PixelSpacing, RawRadiograph, MIN_DIMENSION, STANDARD_SPACING_MM};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Sharpness parameter `a` of the cubic convolution kernel.
pub const BICUBIC_SHARPNESS: f64 = -0.5;

/// Cubic convolution kernel with `a = -0.5` (Catmull-Rom).
pub fn catmull_rom(x: f64) -> f64 {
    let a = BICUBIC_SHARPNESS;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Four source indices (clamped to the border) and their normalized weights.
struct Taps {
    index: [usize; 4],
    weight: [f64; 4],
}

fn taps(in_len: usize, out_len: usize) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let t = src - base;
            let mut index = [0usize; 4];
            let mut weight = [0f64; 4];
            for k in 0..4 {
                let offset = k as f64 - 1.0;
                let i = (base as i64 + k as i64 - 1).clamp(0, in_len as i64 - 1);
                index[k] = i as usize;
                weight[k] = catmull_rom(offset - t);
            }
            let sum: f64 = weight.iter().sum();
            weight.iter_mut().for_each(|w| *w /= sum);
            Taps { index, weight }
        })
        .collect()
}

/// Resamples to 0.2 mm/pixel on both axes with separable bicubic interpolation.
///
/// Output size per axis is `round(n * spacing / 0.2)`. Images already at the
/// standard spacing are returned as-is.
pub fn resample_to_standard(img: &RawRadiograph) -> Result<RawRadiograph> {
    let spacing = img.spacing();
    if spacing.is_standard() {
        return Ok(img.clone());
    }
    let (w, h) = (img.width(), img.height());
    let out_w = (w as f64 * spacing.col_mm / STANDARD_SPACING_MM).round() as usize;
    let out_h = (h as f64 * spacing.row_mm / STANDARD_SPACING_MM).round() as usize;
    if out_w < MIN_DIMENSION || out_h < MIN_DIMENSION {
        return Err(Error::ResampleTooSmall {
            width: out_w,
            height: out_h,
        });
    }

    let src = img.pixels();
    let col_taps = taps(w, out_w);
    let row_taps = taps(h, out_h);

    // Horizontal pass into an h x out_w float buffer.
    let mut horiz = vec![0f64; h * out_w];
    for y in 0..h {
        let row = src.row(y);
        for (x, t) in col_taps.iter().enumerate() {
            horiz[y * out_w + x] = (0..4).map(|k| t.weight[k] * f64::from(row[t.index[k]])).sum();
        }
    }

    let max = f64::from(max_intensity(img.bit_depth()));
    let out = Grid::from_fn(out_w, out_h, |x, y| {
        let t = &row_taps[y];
        let v: f64 = (0..4).map(|k| t.weight[k] * horiz[t.index[k] * out_w + x]).sum();
        v.round().clamp(0.0, max) as u16
    });

    RawRadiograph::new(
        out,
        img.bit_depth(),
        PixelSpacing::isotropic(STANDARD_SPACING_MM),
        img.laterality(),
        img.source_id(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Laterality;

    fn raw(grid: Grid<u16>, bits: u8, spacing: PixelSpacing) -> RawRadiograph {
        RawRadiograph::new(grid, bits, spacing, Laterality::Unknown, "t").unwrap()
    }

    #[test]
    fn kernel_interpolates_and_partitions_unity() {
        assert_eq!(catmull_rom(0.0), 1.0);
        assert_eq!(catmull_rom(1.0), 0.0);
        assert_eq!(catmull_rom(2.0), 0.0);
        for t in [0.0, 0.1, 0.37, 0.5, 0.99] {
            let s: f64 = (-1..=2).map(|k| catmull_rom(k as f64 - t)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dimensions_follow_physical_extent() {
        let img = raw(Grid::filled(100, 100, 10), 8, PixelSpacing::isotropic(0.1));
        assert!(matches!(
            resample_to_standard(&img),
            Err(Error::ResampleTooSmall { width: 50, height: 50 })
        ));
        let img = raw(Grid::filled(200, 150, 10), 8, PixelSpacing::isotropic(0.1));
        let out = resample_to_standard(&img).unwrap();
        assert_eq!((out.width(), out.height()), (100, 75));
        assert!(out.spacing().is_standard());
    }

    #[test]
    fn standard_spacing_is_identity() {
        let grid = Grid::from_fn(80, 70, |x, y| (x * 13 + y * 7) as u16);
        let img = raw(grid, 16, PixelSpacing::isotropic(0.2));
        assert_eq!(resample_to_standard(&img).unwrap(), img);
    }

    #[test]
    fn constant_stays_constant() {
        let img = raw(Grid::filled(300, 280, 500), 16, PixelSpacing::isotropic(0.17));
        let out = resample_to_standard(&img).unwrap();
        assert_eq!((out.width(), out.height()), (255, 238));
        assert!(out.pixels().data().iter().all(|&v| v == 500));
    }

    #[test]
    fn anisotropic_spacing_resamples_per_axis() {
        let img = raw(
            Grid::filled(200, 200, 3),
            8,
            PixelSpacing {
                row_mm: 0.1,
                col_mm: 0.3,
            },
        );
        let out = resample_to_standard(&img).unwrap();
        assert_eq!((out.width(), out.height()), (300, 100));
    }

    #[test]
    fn overshoot_is_clamped_to_bit_range() {
        // A hard edge makes Catmull-Rom ring past the input range.
        let grid = Grid::from_fn(128, 128, |x, _| if x < 64 { 0 } else { 255 });
        let img = raw(grid, 8, PixelSpacing::isotropic(0.37));
        let out = resample_to_standard(&img).unwrap();
        assert!(out.pixels().data().iter().all(|&v| v <= 255));
    }
}
