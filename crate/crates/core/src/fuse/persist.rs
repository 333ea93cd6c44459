//! Versioned JSON model document.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DecisionTree, ForestParams, Node, RandomForestModel, FEATURE_NAMES, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::jsd::THRESHOLD_UNITS;
use crate::NUM_GRADES;

pub const MODEL_FORMAT: &str = "koa-random-forest";
pub const MODEL_VERSION: u64 = 1;

/// Parallel node arrays; leaves have `feature == -1`.
#[derive(Serialize, Deserialize)]
struct TreeArrays {
    feature: Vec<i64>,
    threshold: Vec<f64>,
    left: Vec<usize>,
    right: Vec<usize>,
    counts: Vec<[u32; NUM_GRADES]>,
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    format: String,
    version: u64,
    params: ForestParams,
    training_fingerprint: String,
    features: Vec<String>,
    feature_units: String,
    trees: Vec<TreeArrays>,
}

fn to_arrays(t: &DecisionTree) -> TreeArrays {
    let n = t.nodes.len();
    let mut a = TreeArrays {
        feature: Vec::with_capacity(n),
        threshold: Vec::with_capacity(n),
        left: Vec::with_capacity(n),
        right: Vec::with_capacity(n),
        counts: Vec::with_capacity(n),
    };
    for node in &t.nodes {
        match node {
            Node::Split {
                feature,
                threshold,
                left,
                right,
                counts,
            } => {
                a.feature.push(*feature as i64);
                a.threshold.push(*threshold);
                a.left.push(*left);
                a.right.push(*right);
                a.counts.push(*counts);
            }
            Node::Leaf { counts } => {
                a.feature.push(-1);
                a.threshold.push(0.0);
                a.left.push(0);
                a.right.push(0);
                a.counts.push(*counts);
            }
        }
    }
    a
}

fn from_arrays(a: TreeArrays, index: usize) -> Result<DecisionTree> {
    let bad = |msg: String| Error::ModelFormat(format!("tree {index}: {msg}"));
    let n = a.feature.len();
    if n == 0 {
        return Err(bad("no nodes".into()));
    }
    if [a.threshold.len(), a.left.len(), a.right.len(), a.counts.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(bad("node arrays differ in length".into()));
    }
    let mut parents = vec![0usize; n];
    let mut nodes = Vec::with_capacity(n);
    for i in 0..n {
        let f = a.feature[i];
        if f == -1 {
            if a.counts[i].iter().all(|&c| c == 0) {
                return Err(bad(format!("leaf {i} holds no samples")));
            }
            nodes.push(Node::Leaf { counts: a.counts[i] });
            continue;
        }
        if !(0..NUM_FEATURES as i64).contains(&f) {
            return Err(bad(format!("node {i} splits on feature {f}")));
        }
        let (l, r) = (a.left[i], a.right[i]);
        if l <= i || r <= i || l >= n || r >= n || l == r {
            return Err(bad(format!("node {i} has invalid children {l}, {r}")));
        }
        if !a.threshold[i].is_finite() {
            return Err(bad(format!("node {i} has a non-finite threshold")));
        }
        parents[l] += 1;
        parents[r] += 1;
        nodes.push(Node::Split {
            feature: f as usize,
            threshold: a.threshold[i],
            left: l,
            right: r,
            counts: a.counts[i],
        });
    }
    if parents[0] != 0 || parents[1..].iter().any(|&p| p != 1) {
        return Err(bad("node arrays do not form a tree".into()));
    }
    Ok(DecisionTree { nodes })
}

pub fn save_model(model: &RandomForestModel) -> String {
    let doc = ModelDocument {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        params: model.params,
        training_fingerprint: model.training_fingerprint.clone(),
        features: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        feature_units: THRESHOLD_UNITS.to_string(),
        trees: model.trees.iter().map(to_arrays).collect(),
    };
    serde_json::to_string(&doc).expect("model serializes")
}

pub fn load_model(text: &str) -> Result<RandomForestModel> {
    let probe: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::ModelFormat(e.to_string()))?;
    match probe.get("version").and_then(serde_json::Value::as_u64) {
        Some(MODEL_VERSION) => {}
        Some(v) => return Err(Error::VersionMismatch(v)),
        None => return Err(Error::ModelFormat("missing version".into())),
    }
    let doc: ModelDocument =
        serde_json::from_value(probe).map_err(|e| Error::ModelFormat(e.to_string()))?;
    if doc.format != MODEL_FORMAT {
        return Err(Error::ModelFormat(format!("unknown format `{}`", doc.format)));
    }
    doc.params.validate()?;
    if doc.trees.len() != doc.params.n_trees {
        return Err(Error::ModelFormat(format!(
            "{} trees listed, params say {}",
            doc.trees.len(),
            doc.params.n_trees
        )));
    }
    let trees = doc
        .trees
        .into_iter()
        .enumerate()
        .map(|(i, t)| from_arrays(t, i))
        .collect::<Result<_>>()?;
    Ok(RandomForestModel {
        trees,
        params: doc.params,
        training_fingerprint: doc.training_fingerprint,
    })
}

/// SHA-256 of the saved document, hex-encoded.
pub fn model_hash(model: &RandomForestModel) -> String {
    hex::encode(Sha256::digest(save_model(model).as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fuse::synthetic::rule_dataset;
    use crate::fuse::{predict, train_forest};

    fn small_model() -> RandomForestModel {
        let params = ForestParams {
            n_trees: 12,
            ..ForestParams::with_seed(3)
        };
        train_forest(&rule_dataset(400, 21), params).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = small_model();
        let text = save_model(&m);
        let back = load_model(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(save_model(&back), text);
        for (fv, _) in rule_dataset(200, 99) {
            assert_eq!(predict(&m, &fv).unwrap(), predict(&back, &fv).unwrap());
        }
    }

    #[test]
    fn truncated_document_fails() {
        let text = save_model(&small_model());
        assert!(matches!(
            load_model(&text[..text.len() / 2]),
            Err(Error::ModelFormat(_))
        ));
    }

    #[test]
    fn unknown_version_fails() {
        let text = save_model(&small_model()).replacen("\"version\":1", "\"version\":7", 1);
        assert!(matches!(load_model(&text), Err(Error::VersionMismatch(7))));
    }

    #[test]
    fn corrupted_node_arrays_fail() {
        let m = small_model();
        let mut doc: serde_json::Value = serde_json::from_str(&save_model(&m)).unwrap();
        doc["trees"][0]["left"][0] = serde_json::json!(0);
        assert!(matches!(load_model(&doc.to_string()), Err(Error::ModelFormat(_))));

        let mut doc: serde_json::Value = serde_json::from_str(&save_model(&m)).unwrap();
        doc["trees"][1]["feature"].as_array_mut().unwrap().pop();
        assert!(matches!(load_model(&doc.to_string()), Err(Error::ModelFormat(_))));

        let mut doc: serde_json::Value = serde_json::from_str(&save_model(&m)).unwrap();
        doc["trees"].as_array_mut().unwrap().pop();
        assert!(matches!(load_model(&doc.to_string()), Err(Error::ModelFormat(_))));
    }
}
