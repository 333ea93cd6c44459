use super::{NormalizedImage, RawRadiograph};
use crate::error::{Error, Result};
use crate::grid::Grid;

const LOW_PERCENTILE: f64 = 0.01;
const HIGH_PERCENTILE: f64 = 0.99;

/// Linear-interpolation percentile (`q` in [0, 1]) of integer samples, via a histogram.
pub fn percentile_linear(values: &[u16], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty sample");
    let mut hist = vec![0usize; 1 << 16];
    for &v in values {
        hist[v as usize] += 1;
    }
    let rank = q.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    let v_lo = order_statistic(&hist, lo);
    if frac == 0.0 {
        return v_lo;
    }
    let v_hi = order_statistic(&hist, lo + 1);
    v_lo + frac * (v_hi - v_lo)
}

/// The `k`-th smallest sample (0-based).
fn order_statistic(hist: &[usize], k: usize) -> f64 {
    let mut seen = 0usize;
    for (v, &count) in hist.iter().enumerate() {
        seen += count;
        if seen > k {
            return v as f64;
        }
    }
    unreachable!("rank beyond sample size")
}

/// Reduces to 8-bit levels and scales to [0, 1].
///
/// 8-bit inputs pass straight through `v / 255`. 16-bit inputs are windowed to
/// their [p1, p99] percentiles, mapped linearly onto 0..=255 and rounded. A
/// degenerate window (p1 == p99) maps every pixel to 0.5 and sets the
/// `degenerate_window` flag.
pub fn normalize(img: &RawRadiograph) -> Result<NormalizedImage> {
    if !img.spacing().is_standard() {
        return Err(Error::InvalidImage(format!(
            "normalize expects 0.2 mm/px input, got {:?}",
            img.spacing()
        )));
    }
    let src = img.pixels();
    let (pixels, window, degenerate) = if img.bit_depth() == 8 {
        (src.map(|v| v as f32 / 255.0), None, false)
    } else {
        let lo = percentile_linear(src.data(), LOW_PERCENTILE);
        let hi = percentile_linear(src.data(), HIGH_PERCENTILE);
        if hi <= lo {
            (Grid::filled(src.width(), src.height(), 0.5f32), Some((lo, hi)), true)
        } else {
            let span = hi - lo;
            let mapped = src.map(|v| {
                let level = ((f64::from(v) - lo) / span).clamp(0.0, 1.0) * 255.0;
                (level.round() / 255.0) as f32
            });
            (mapped, Some((lo, hi)), false)
        }
    };
    Ok(NormalizedImage {
        pixels,
        laterality: img.laterality(),
        source_id: img.source_id().to_string(),
        window,
        degenerate_window: degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{Laterality, PixelSpacing};

    fn raw(grid: Grid<u16>, bits: u8) -> RawRadiograph {
        RawRadiograph::new(grid, bits, PixelSpacing::isotropic(0.2), Laterality::Left, "n").unwrap()
    }

    /// Sort-based percentile, independent of the histogram path.
    fn sorted_percentile(values: &[u16], q: f64) -> f64 {
        let mut v: Vec<f64> = values.iter().map(|&x| f64::from(x)).collect();
        v.sort_by(f64::total_cmp);
        let rank = q * (v.len() - 1) as f64;
        let lo = rank.floor() as usize;
        let hi = rank.ceil() as usize;
        v[lo] + (rank - lo as f64) * (v[hi] - v[lo])
    }

    #[test]
    fn eight_bit_passes_through() {
        let grid = Grid::from_fn(64, 64, |x, y| ((x + y * 64) % 256) as u16);
        let out = normalize(&raw(grid.clone(), 8)).unwrap();
        for (a, b) in grid.data().iter().zip(out.pixels().data()) {
            assert_eq!(*b, *a as f32 / 255.0);
        }
        assert_eq!(out.pixels().get(63, 3), 1.0);
        assert_eq!(out.window(), None);
    }

    #[test]
    fn sixteen_bit_ramp_uses_percentile_window() {
        // 256 x 256 = 65536 pixels holding every 16-bit value once.
        let grid = Grid::from_fn(256, 256, |x, y| (y * 256 + x) as u16);
        let p1 = sorted_percentile(grid.data(), 0.01);
        let p99 = sorted_percentile(grid.data(), 0.99);
        assert_eq!(percentile_linear(grid.data(), 0.01), p1);
        assert_eq!(percentile_linear(grid.data(), 0.99), p99);

        let out = normalize(&raw(grid.clone(), 16)).unwrap();
        assert_eq!(out.window(), Some((p1, p99)));
        let at = |v: f64| {
            let i = v.round() as usize;
            out.pixels().get(i % 256, i / 256)
        };
        assert_eq!(at(p99.ceil()), 1.0);
        assert_eq!(at(p1.floor()), 0.0);
        assert_eq!(out.pixels().get(255, 255), 1.0);
        assert_eq!(out.pixels().get(0, 0), 0.0);
        // Interior maps linearly then quantizes to 8-bit levels.
        let mid = 32768.0;
        let expected = (((mid - p1) / (p99 - p1) * 255.0).round() / 255.0) as f32;
        assert_eq!(at(mid), expected);
    }

    #[test]
    fn constant_sixteen_bit_is_degenerate() {
        let out = normalize(&raw(Grid::filled(64, 64, 1234), 16)).unwrap();
        assert!(out.degenerate_window());
        assert!(out.pixels().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn rejects_non_standard_spacing() {
        let img = RawRadiograph::new(
            Grid::filled(64, 64, 0),
            8,
            PixelSpacing::isotropic(0.1),
            Laterality::Left,
            "n",
        )
        .unwrap();
        assert!(normalize(&img).is_err());
    }

    #[test]
    fn histogram_percentile_matches_sort_on_small_samples() {
        let vals = [5u16, 1, 9, 9, 3, 1000, 2, 2];
        for q in [0.0, 0.01, 0.25, 0.5, 0.9, 0.99, 1.0] {
            assert_eq!(percentile_linear(&vals, q), sorted_percentile(&vals, q));
        }
    }
}
