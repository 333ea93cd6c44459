//! Seeded inputs shared by the benchmarks.

use koa_core::fuse::synthetic::two_signal_dataset;
use koa_core::phantom::{emit_backend_fixtures, generate, CondyleShape, PhantomKnee, PhantomSpec};
use koa_core::pipeline::{FileDetector, PipelineConfig};
use koa_core::segment::FileSegmenter;
use koa_core::{FeatureVector, Grid, Laterality, NormalizedImage, PixelSpacing, RawRadiograph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Joint-space distances for `n` knees, roughly spread over the JSN range.
pub fn distances(n: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (rng.random_range(2.0..32.0), rng.random_range(2.0..32.0)))
        .collect()
}

pub fn training_rows(n: usize, seed: u64) -> Vec<(FeatureVector, u8)> {
    two_signal_dataset(n, seed)
}

/// 16-bit noise image at the given spacing.
pub fn radiograph(width: usize, height: usize, spacing_mm: f64, seed: u64) -> RawRadiograph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = Grid::from_fn(width, height, |_, _| rng.random_range(0..4096u16));
    RawRadiograph::new(grid, 16, PixelSpacing::isotropic(spacing_mm), Laterality::Left, "bench")
        .expect("valid radiograph")
}

/// A bilateral phantom with its backend documents.
pub struct PhantomStudy {
    pub image: NormalizedImage,
    pub detector: FileDetector,
    pub segmenter: FileSegmenter,
    pub config: PipelineConfig,
}

pub fn phantom_study() -> PhantomStudy {
    let spec = PhantomSpec::bilateral(
        "bench",
        0,
        PhantomKnee::new([360, 450], 14, 22, CondyleShape::Vee),
        PhantomKnee::wedge([1040, 450], 20, 16, 0.4),
    );
    let (image, truth) = generate(&spec).expect("valid phantom");
    let (masks, dets) = emit_backend_fixtures(&truth);
    PhantomStudy {
        image,
        detector: FileDetector::new(dets, "bench"),
        segmenter: FileSegmenter::new(masks, "bench"),
        config: PipelineConfig::default(),
    }
}
