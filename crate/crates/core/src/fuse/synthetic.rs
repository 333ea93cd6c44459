//! Seeded synthetic datasets for checking what the forest learns.
//!
//! The rule task labels vectors with a fixed formula over the medial
//! distance and `p4`. The two-signal task draws a latent grade and exposes it
//! through a noisy probability block and, independently, noisy medial and
//! lateral distances; neither block alone recovers the grade as well as both.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::{accuracy, train_forest, FeatureVector, ForestParams, NUM_FEATURES};
use crate::classify::ProbabilityVector;
use crate::error::Result;
use crate::jsd::{grade_jsn, ThresholdSet};
use crate::NUM_GRADES;

/// Noise on the latent grade seen by the probability block.
pub const PROB_NOISE_SD: f64 = 0.45;
/// Per-side noise on the joint-space distances, in pixels.
pub const JSD_NOISE_SD: f64 = 3.5;
pub const JSD_INTERCEPT_PX: f64 = 30.0;
pub const JSD_SLOPE_PX: f64 = 5.0;

/// `min(4, medial JSN grade under the published boundaries + [p4 > 0.5])`.
pub fn rule_label(fv: &FeatureVector) -> u8 {
    let v = fv.values();
    let jsn = grade_jsn(v[5], &ThresholdSet::published().med).expect("non-negative");
    (jsn + u8::from(v[4] > 0.5)).min(4)
}

pub fn rule_dataset(n: usize, seed: u64) -> Vec<(FeatureVector, u8)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let p4: f64 = rng.random();
            let mut rest = [0.0; 4];
            for r in &mut rest {
                *r = rng.random::<f64>() + 1e-3;
            }
            let scale = (1.0 - p4) / rest.iter().sum::<f64>();
            let mut v = [0.0; NUM_FEATURES];
            for (slot, r) in v.iter_mut().zip(rest) {
                *slot = r * scale;
            }
            v[4] = p4;
            v[5] = rng.random_range(0.0..30.0);
            v[6] = rng.random_range(0.0..30.0);
            let fv = FeatureVector::new(renormalize(v)).expect("valid synthetic vector");
            let label = rule_label(&fv);
            (fv, label)
        })
        .collect()
}

/// Rescales the probability block so it sums to one within rounding.
fn renormalize(mut v: [f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
    let s: f64 = v[..NUM_GRADES].iter().sum();
    for p in &mut v[..NUM_GRADES] {
        *p /= s;
    }
    v
}

/// Probability block peaked at the grade nearest `s`.
fn soft_probabilities(s: f64) -> [f64; NUM_GRADES] {
    let mut p = [0.0; NUM_GRADES];
    for (k, pk) in p.iter_mut().enumerate() {
        let d = k as f64 - s;
        *pk = (-d * d).exp();
    }
    let sum: f64 = p.iter().sum();
    p.map(|x| x / sum)
}

pub fn two_signal_dataset(n: usize, seed: u64) -> Vec<(FeatureVector, u8)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prob_noise = Normal::new(0.0, PROB_NOISE_SD).expect("valid sd");
    let jsd_noise = Normal::new(0.0, JSD_NOISE_SD).expect("valid sd");
    (0..n)
        .map(|_| {
            let y = rng.random_range(0..NUM_GRADES as u8);
            let yf = f64::from(y);
            let p = soft_probabilities(yf + prob_noise.sample(&mut rng));
            let base = JSD_INTERCEPT_PX - JSD_SLOPE_PX * yf;
            let med = (base + jsd_noise.sample(&mut rng)).max(0.0);
            let lat = (base + jsd_noise.sample(&mut rng)).max(0.0);
            let mut v = [0.0; NUM_FEATURES];
            v[..NUM_GRADES].copy_from_slice(&p);
            v[5] = med;
            v[6] = lat;
            (FeatureVector::new(v).expect("valid synthetic vector"), y)
        })
        .collect()
}

/// Accuracy of taking the most probable grade from the probability block.
pub fn argmax_accuracy(rows: &[(FeatureVector, u8)]) -> f64 {
    let hits = rows
        .iter()
        .filter(|(fv, y)| {
            let p: [f64; NUM_GRADES] = fv.values()[..NUM_GRADES].try_into().expect("5 values");
            ProbabilityVector::normalized(&p).map(|p| p.argmax()).ok() == Some(*y)
        })
        .count();
    hits as f64 / rows.len() as f64
}

/// Replaces the probability block with the uniform vector, leaving only the distances.
pub fn distances_only(rows: &[(FeatureVector, u8)]) -> Vec<(FeatureVector, u8)> {
    rows.iter()
        .map(|(fv, y)| {
            let mut v = *fv.values();
            v[..NUM_GRADES].fill(1.0 / NUM_GRADES as f64);
            (FeatureVector::new(v).expect("uniform block is valid"), *y)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FusionComparison {
    pub forest: f64,
    pub argmax: f64,
    pub jsn_only: f64,
}

impl FusionComparison {
    /// Smallest margin of the fused forest over either single-signal baseline.
    pub fn margin(&self) -> f64 {
        (self.forest - self.argmax).min(self.forest - self.jsn_only)
    }
}

/// Trains on `n_train` two-signal rows and scores all three models on `n_test` fresh rows.
pub fn fusion_comparison(n_train: usize, n_test: usize, seed: u64, params: ForestParams) -> Result<FusionComparison> {
    let train = two_signal_dataset(n_train, seed);
    let test = two_signal_dataset(n_test, seed.wrapping_add(1));
    let fused = train_forest(&train, params)?;
    let jsn = train_forest(&distances_only(&train), params)?;
    Ok(FusionComparison {
        forest: accuracy(&fused, &test)?,
        argmax: argmax_accuracy(&test),
        jsn_only: accuracy(&jsn, &distances_only(&test))?,
    })
}
