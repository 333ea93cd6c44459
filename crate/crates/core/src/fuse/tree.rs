//! CART classification tree grown on a bootstrap sample with Gini splits.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureVector, ForestParams, NUM_FEATURES};
use crate::NUM_GRADES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        counts: [u32; NUM_GRADES],
    },
    Leaf {
        counts: [u32; NUM_GRADES],
    },
}

impl Node {
    pub fn counts(&self) -> &[u32; NUM_GRADES] {
        match self {
            Node::Split { counts, .. } | Node::Leaf { counts } => counts,
        }
    }
}

/// Nodes in pre-order; index 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
}

/// Structural summary of a tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeAudit {
    pub max_depth: usize,
    pub min_leaf_samples: u32,
    pub leaves: usize,
}

impl DecisionTree {
    pub fn leaf_for(&self, x: &[f64; NUM_FEATURES]) -> &[u32; NUM_GRADES] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { counts } => return counts,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    /// Majority class at the reached leaf; ties go to the lower grade.
    pub fn vote(&self, x: &[f64; NUM_FEATURES]) -> u8 {
        majority(self.leaf_for(x))
    }

    pub fn audit(&self) -> TreeAudit {
        let mut audit = TreeAudit {
            max_depth: 0,
            min_leaf_samples: u32::MAX,
            leaves: 0,
        };
        let mut stack = vec![(0usize, 0usize)];
        while let Some((i, depth)) = stack.pop() {
            match &self.nodes[i] {
                Node::Leaf { counts } => {
                    audit.leaves += 1;
                    audit.max_depth = audit.max_depth.max(depth);
                    audit.min_leaf_samples = audit.min_leaf_samples.min(counts.iter().sum());
                }
                Node::Split { left, right, .. } => {
                    stack.push((*left, depth + 1));
                    stack.push((*right, depth + 1));
                }
            }
        }
        audit
    }
}

pub(crate) fn majority(counts: &[u32; NUM_GRADES]) -> u8 {
    let mut best = 0;
    for k in 1..NUM_GRADES {
        if counts[k] > counts[best] {
            best = k;
        }
    }
    best as u8
}

fn gini(counts: &[u32; NUM_GRADES], n: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = f64::from(n);
    1.0 - counts
        .iter()
        .map(|&c| {
            let p = f64::from(c) / n;
            p * p
        })
        .sum::<f64>()
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    impurity: f64,
    /// Node samples sorted on `feature`; the first `n_left` go left.
    order: Vec<usize>,
    n_left: usize,
}

fn class_counts(rows: &[(FeatureVector, u8)], idx: &[usize]) -> [u32; NUM_GRADES] {
    let mut c = [0u32; NUM_GRADES];
    for &i in idx {
        c[rows[i].1 as usize] += 1;
    }
    c
}

fn best_split_on(
    rows: &[(FeatureVector, u8)],
    idx: &[usize],
    feature: usize,
    min_leaf: usize,
    total: &[u32; NUM_GRADES],
) -> Option<BestSplit> {
    let n = idx.len();
    let mut order = idx.to_vec();
    order.sort_by(|&a, &b| {
        rows[a].0.values()[feature]
            .total_cmp(&rows[b].0.values()[feature])
            .then(a.cmp(&b))
    });
    let value = |i: usize| rows[order[i]].0.values()[feature];
    let mut left = [0u32; NUM_GRADES];
    let mut best: Option<(f64, usize)> = None;
    for i in 1..n {
        left[rows[order[i - 1]].1 as usize] += 1;
        if i < min_leaf || n - i < min_leaf || value(i - 1) >= value(i) {
            continue;
        }
        let mut right = *total;
        for k in 0..NUM_GRADES {
            right[k] -= left[k];
        }
        let (nl, nr) = (i as u32, (n - i) as u32);
        let impurity =
            (f64::from(nl) * gini(&left, nl) + f64::from(nr) * gini(&right, nr)) / n as f64;
        if best.is_none_or(|(b, _)| impurity < b) {
            best = Some((impurity, i));
        }
    }
    let (impurity, i) = best?;
    let (lo, hi) = (value(i - 1), value(i));
    let mid = lo + (hi - lo) / 2.0;
    // Adjacent floats can round the midpoint up to `hi`.
    let threshold = if mid < hi { mid } else { lo };
    Some(BestSplit {
        feature,
        threshold,
        impurity,
        order,
        n_left: i,
    })
}

/// Grows one tree on the rows listed in `sample` (indices may repeat).
pub(crate) fn grow<R: Rng>(
    rows: &[(FeatureVector, u8)],
    sample: Vec<usize>,
    params: &ForestParams,
    rng: &mut R,
) -> DecisionTree {
    let mut nodes: Vec<Node> = Vec::new();
    grow_node(rows, sample, 0, params, rng, &mut nodes);
    DecisionTree { nodes }
}

fn grow_node<R: Rng>(
    rows: &[(FeatureVector, u8)],
    idx: Vec<usize>,
    depth: usize,
    params: &ForestParams,
    rng: &mut R,
    nodes: &mut Vec<Node>,
) -> usize {
    let counts = class_counts(rows, &idx);
    let here = nodes.len();
    nodes.push(Node::Leaf { counts });

    let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
    if pure || depth >= params.max_depth || idx.len() < 2 * params.min_leaf {
        return here;
    }

    let mut features: Vec<usize> = (0..NUM_FEATURES).collect();
    features.shuffle(rng);
    let mut best: Option<BestSplit> = None;
    for (tried, &f) in features.iter().enumerate() {
        // Past the sampled features, keep looking only until something splits.
        if tried >= params.features_per_split && best.is_some() {
            break;
        }
        if let Some(s) = best_split_on(rows, &idx, f, params.min_leaf, &counts) {
            if best.as_ref().is_none_or(|b| s.impurity < b.impurity) {
                best = Some(s);
            }
        }
    }
    let Some(split) = best else {
        return here;
    };

    let left_idx = split.order[..split.n_left].to_vec();
    let right_idx = split.order[split.n_left..].to_vec();
    let left = grow_node(rows, left_idx, depth + 1, params, rng, nodes);
    let right = grow_node(rows, right_idx, depth + 1, params, rng, nodes);
    nodes[here] = Node::Split {
        feature: split.feature,
        threshold: split.threshold,
        left,
        right,
        counts,
    };
    here
}
