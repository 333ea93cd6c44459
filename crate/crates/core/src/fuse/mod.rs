//! Final KL grade from the 7-element fused feature vector.
//!
//! A bagged committee of Gini classification trees votes on the grade. Each
//! tree sees a bootstrap resample drawn from its own ChaCha stream, so the
//! model depends only on the training rows (as a multiset), the parameters
//! and the master seed.

mod persist;
pub mod synthetic;
mod tree;

use std::collections::BTreeMap;
use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classify::ProbabilityVector;
use crate::error::{Error, Result};
use crate::jsd::{JsdMeasurement, JsnGrades};
use crate::NUM_GRADES;

pub use persist::{load_model, model_hash, save_model, MODEL_FORMAT, MODEL_VERSION};
pub use tree::{DecisionTree, Node, TreeAudit};

pub const NUM_FEATURES: usize = 7;
pub const FEATURE_NAMES: [&str; NUM_FEATURES] =
    ["p0", "p1", "p2", "p3", "p4", "med_px", "lat_px"];
pub const MIN_TRAINING_ROWS: usize = 10;

/// `(p0..p4, med_px, lat_px)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector([f64; NUM_FEATURES]);

impl FeatureVector {
    pub fn new(values: [f64; NUM_FEATURES]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFeatures(format!("non-finite entry in {values:?}")));
        }
        let probs = &values[..NUM_GRADES];
        if probs.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidFeatures("negative probability".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > ProbabilityVector::TOLERANCE {
            return Err(Error::InvalidFeatures(format!("probabilities sum to {sum}")));
        }
        if values[5] < 0.0 || values[6] < 0.0 {
            return Err(Error::InvalidFeatures("negative joint-space distance".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64; NUM_FEATURES] {
        &self.0
    }
}

/// Concatenates probabilities with medial and lateral distances in pixels.
pub fn assemble_features(p: &ProbabilityVector, jsd: &JsdMeasurement) -> Result<FeatureVector> {
    features_from_parts(p, jsd.med_px, jsd.lat_px)
}

pub fn features_from_parts(p: &ProbabilityVector, med_px: f64, lat_px: f64) -> Result<FeatureVector> {
    let mut v = [0.0; NUM_FEATURES];
    v[..NUM_GRADES].copy_from_slice(p.values());
    v[5] = med_px;
    v[6] = lat_px;
    FeatureVector::new(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub features_per_split: usize,
    pub master_seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 8,
            min_leaf: 2,
            features_per_split: 2,
            master_seed: 0,
        }
    }
}

impl ForestParams {
    pub fn with_seed(master_seed: u64) -> Self {
        Self {
            master_seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::InvalidParams("n_trees must be positive".into()));
        }
        if self.max_depth == 0 {
            return Err(Error::InvalidParams("max_depth must be positive".into()));
        }
        if self.min_leaf == 0 {
            return Err(Error::InvalidParams("min_leaf must be positive".into()));
        }
        if !(1..=NUM_FEATURES).contains(&self.features_per_split) {
            return Err(Error::InvalidParams(format!(
                "features_per_split must be in 1..={NUM_FEATURES}"
            )));
        }
        Ok(())
    }

    /// ChaCha8 stream `tree` of the master seed.
    fn tree_rng(&self, tree: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(tree as u64);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForestModel {
    pub(crate) trees: Vec<DecisionTree>,
    pub(crate) params: ForestParams,
    pub(crate) training_fingerprint: String,
}

/// Outcome of the committee vote for one knee.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlAssessment {
    pub kl_grade: u8,
    pub vote_distribution: [f64; NUM_GRADES],
    pub inputs: FeatureVector,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jsn: Option<JsnGrades>,
    /// Backend identifiers and measurement summary, filled in by the pipeline.
    pub provenance: BTreeMap<String, String>,
}

/// Sorts rows into a canonical order so row permutations train identical models.
fn canonical_rows(dataset: &[(FeatureVector, u8)]) -> Vec<(FeatureVector, u8)> {
    let mut rows = dataset.to_vec();
    rows.sort_by(|a, b| {
        for (x, y) in a.0.values().iter().zip(b.0.values()) {
            let o = x.total_cmp(y);
            if o.is_ne() {
                return o;
            }
        }
        a.1.cmp(&b.1)
    });
    rows
}

/// SHA-256 over the canonical rows (little-endian f64 bits, then the label).
pub fn training_fingerprint(dataset: &[(FeatureVector, u8)]) -> String {
    let mut h = Sha256::new();
    for (fv, label) in canonical_rows(dataset) {
        for v in fv.values() {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update([label]);
    }
    hex::encode(h.finalize())
}

pub fn train_forest(dataset: &[(FeatureVector, u8)], params: ForestParams) -> Result<RandomForestModel> {
    params.validate()?;
    if dataset.len() < MIN_TRAINING_ROWS {
        return Err(Error::Dataset(format!(
            "{} rows, need at least {MIN_TRAINING_ROWS}",
            dataset.len()
        )));
    }
    if let Some((_, l)) = dataset.iter().find(|(_, l)| *l as usize >= NUM_GRADES) {
        return Err(Error::Dataset(format!("label {l} outside 0..=4")));
    }
    let rows = canonical_rows(dataset);
    let n = rows.len();
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = params.tree_rng(t);
            let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            tree::grow(&rows, sample, &params, &mut rng)
        })
        .collect();
    Ok(RandomForestModel {
        trees,
        params,
        training_fingerprint: training_fingerprint(&rows),
    })
}

impl RandomForestModel {
    pub fn params(&self) -> &ForestParams {
        &self.params
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn training_fingerprint(&self) -> &str {
        &self.training_fingerprint
    }

    /// Vote counts per grade.
    pub fn votes(&self, fv: &FeatureVector) -> [u32; NUM_GRADES] {
        let mut votes = [0u32; NUM_GRADES];
        for t in &self.trees {
            votes[t.vote(fv.values()) as usize] += 1;
        }
        votes
    }

    /// Worst-case structure across all trees.
    pub fn audit(&self) -> TreeAudit {
        self.trees.iter().map(DecisionTree::audit).fold(
            TreeAudit {
                max_depth: 0,
                min_leaf_samples: u32::MAX,
                leaves: 0,
            },
            |acc, a| TreeAudit {
                max_depth: acc.max_depth.max(a.max_depth),
                min_leaf_samples: acc.min_leaf_samples.min(a.min_leaf_samples),
                leaves: acc.leaves + a.leaves,
            },
        )
    }
}

/// Committee vote; the grade is the modal vote with ties to the lower grade.
pub fn predict(model: &RandomForestModel, fv: &FeatureVector) -> Result<KlAssessment> {
    if model.trees.is_empty() {
        return Err(Error::UntrainedModel);
    }
    Ok(assessment_from_votes(&model.votes(fv), *fv))
}

pub(crate) fn assessment_from_votes(votes: &[u32; NUM_GRADES], inputs: FeatureVector) -> KlAssessment {
    let total: u32 = votes.iter().sum();
    let mut dist = [0.0; NUM_GRADES];
    for (d, &v) in dist.iter_mut().zip(votes) {
        *d = f64::from(v) / f64::from(total);
    }
    KlAssessment {
        kl_grade: tree::majority(votes),
        vote_distribution: dist,
        inputs,
        jsn: None,
        provenance: BTreeMap::new(),
    }
}

/// Fraction of rows whose predicted grade equals the label.
pub fn accuracy(model: &RandomForestModel, rows: &[(FeatureVector, u8)]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut hits = 0usize;
    for (fv, label) in rows {
        if predict(model, fv)?.kl_grade == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / rows.len() as f64)
}

/// Training rows as delimited text: `p0,p1,p2,p3,p4,med_px,lat_px,kl` with a header.
pub fn read_dataset(reader: impl Read) -> Result<Vec<(FeatureVector, u8)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != NUM_FEATURES + 1 {
            return Err(Error::Dataset(format!(
                "row {}: expected {} fields, found {}",
                line + 1,
                NUM_FEATURES + 1,
                rec.len()
            )));
        }
        let mut v = [0.0; NUM_FEATURES];
        for (i, slot) in v.iter_mut().enumerate() {
            *slot = rec[i]
                .parse()
                .map_err(|_| Error::Dataset(format!("row {}: bad number `{}`", line + 1, &rec[i])))?;
        }
        let label: u8 = rec[NUM_FEATURES]
            .parse()
            .map_err(|_| Error::Dataset(format!("row {}: bad label", line + 1)))?;
        rows.push((FeatureVector::new(v)?, label));
    }
    Ok(rows)
}

pub fn write_dataset(rows: &[(FeatureVector, u8)], writer: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = FEATURE_NAMES.to_vec();
    header.push("kl");
    w.write_record(&header)?;
    for (fv, label) in rows {
        let mut rec: Vec<String> = fv.values().iter().map(|v| v.to_string()).collect();
        rec.push(label.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::synthetic::{rule_dataset, rule_label};
    use super::*;
    use crate::jsd::{ImageSide, PixelPoint, SideMap};

    fn fv(p: [f64; 5], med: f64, lat: f64) -> FeatureVector {
        features_from_parts(&ProbabilityVector::new(p).unwrap(), med, lat).unwrap()
    }

    #[test]
    fn assemble_concatenates_in_order() {
        let jsd = JsdMeasurement {
            med_px: 21.0,
            lat_px: 28.0,
            med_mm: 4.2,
            lat_mm: 5.6,
            lowest_med: PixelPoint { x: 0, y: 0 },
            lowest_lat: PixelPoint { x: 0, y: 0 },
            med_lines: vec![],
            lat_lines: vec![],
            side_map: SideMap { medial: ImageSide::Left },
        };
        let p = ProbabilityVector::new([0.1, 0.2, 0.3, 0.3, 0.1]).unwrap();
        let f = assemble_features(&p, &jsd).unwrap();
        assert_eq!(f.values(), &[0.1, 0.2, 0.3, 0.3, 0.1, 21.0, 28.0]);

        let f = features_from_parts(&ProbabilityVector::uniform(), 0.0, 0.0).unwrap();
        assert_eq!(f.values(), &[0.2, 0.2, 0.2, 0.2, 0.2, 0.0, 0.0]);
        assert!(features_from_parts(&ProbabilityVector::uniform(), -1.0, 0.0).is_err());
        assert!(FeatureVector::new([0.5, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn constant_labels_give_constant_forest() {
        let rows: Vec<_> = (0..20)
            .map(|i| (fv([0.2; 5], i as f64, 30.0 - i as f64), 3u8))
            .collect();
        let m = train_forest(&rows, ForestParams::with_seed(7)).unwrap();
        for i in 0..40 {
            let a = predict(&m, &fv([0.2; 5], i as f64 * 0.7, 3.0)).unwrap();
            assert_eq!(a.kl_grade, 3);
            assert_eq!(a.vote_distribution, [0.0, 0.0, 0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn vote_ties_resolve_low() {
        let a = assessment_from_votes(&[0, 50, 50, 0, 0], fv([0.2; 5], 1.0, 1.0));
        assert_eq!(a.kl_grade, 1);
        assert_eq!(a.vote_distribution, [0.0, 0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn rejects_small_or_bad_datasets() {
        let rows: Vec<_> = (0..9).map(|i| (fv([0.2; 5], i as f64, 1.0), 0u8)).collect();
        assert!(matches!(
            train_forest(&rows, ForestParams::default()),
            Err(Error::Dataset(_))
        ));
        let rows: Vec<_> = (0..12).map(|i| (fv([0.2; 5], i as f64, 1.0), 5u8)).collect();
        assert!(train_forest(&rows, ForestParams::default()).is_err());
        let p = ForestParams {
            max_depth: 0,
            ..ForestParams::default()
        };
        assert!(matches!(p.validate(), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn rule_task_is_learned() {
        let train = rule_dataset(2000, 11);
        let test = rule_dataset(1000, 12);
        for (fv, l) in &train {
            assert_eq!(rule_label(fv), *l);
        }
        let m = train_forest(&train, ForestParams::with_seed(5)).unwrap();
        let train_acc = accuracy(&m, &train).unwrap();
        let test_acc = accuracy(&m, &test).unwrap();
        assert!(train_acc >= 0.99, "train accuracy {train_acc}");
        assert!(test_acc >= 0.95, "held-out accuracy {test_acc}");
    }

    #[test]
    fn training_is_deterministic_and_order_free() {
        let rows = rule_dataset(300, 3);
        let a = train_forest(&rows, ForestParams::with_seed(9)).unwrap();
        let b = train_forest(&rows, ForestParams::with_seed(9)).unwrap();
        assert_eq!(model_hash(&a), model_hash(&b));

        let mut shuffled = rows.clone();
        shuffled.reverse();
        shuffled.swap(0, 150);
        let c = train_forest(&shuffled, ForestParams::with_seed(9)).unwrap();
        assert_eq!(a, c);
        for (fv, _) in rule_dataset(100, 4) {
            assert_eq!(predict(&a, &fv).unwrap(), predict(&c, &fv).unwrap());
        }

        let d = train_forest(&rows, ForestParams::with_seed(10)).unwrap();
        assert_ne!(model_hash(&a), model_hash(&d));
    }

    #[test]
    fn structure_respects_caps() {
        let rows = rule_dataset(1500, 8);
        let m = train_forest(&rows, ForestParams::with_seed(1)).unwrap();
        assert_eq!(m.trees().len(), 100);
        let audit = m.audit();
        assert!(audit.max_depth <= 8);
        assert!(audit.min_leaf_samples >= 2);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let rows = rule_dataset(25, 2);
        let mut buf = Vec::new();
        write_dataset(&rows, &mut buf).unwrap();
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), rows);
        assert!(read_dataset("a,b\n1,2\n".as_bytes()).is_err());
    }
}
