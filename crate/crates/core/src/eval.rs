//! Grading metrics: confusion matrix, accuracy variants, weighted
//! precision/recall/F1, the binary OA collapse at KL ≥ 2, the one-grade-off
//! rate and quadratic weighted kappa between raters.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Read;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::NUM_GRADES;

/// Lowest grade counted as positive in the binary collapse.
pub const OA_POSITIVE_FROM: u8 = 2;

/// Rows are true grades, columns predicted grades.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_GRADES]; NUM_GRADES],
    pub n: u64,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; NUM_GRADES]; NUM_GRADES]) -> Self {
        let n = counts.iter().flatten().sum();
        Self { counts, n }
    }

    pub fn transpose(&self) -> Self {
        let mut t = [[0; NUM_GRADES]; NUM_GRADES];
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                t[j][i] = c;
            }
        }
        Self::from_counts(t)
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_GRADES).map(|k| self.counts[k][k]).sum()
    }

    fn support(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    fn predicted(&self, k: usize) -> u64 {
        self.counts.iter().map(|row| row[k]).sum()
    }
}

fn check_grades(xs: &[u8]) -> Result<()> {
    match xs.iter().find(|&&g| g as usize >= NUM_GRADES) {
        Some(&g) => Err(Error::GradeOutOfRange(i64::from(g))),
        None => Ok(()),
    }
}

fn check_pair(a: &[u8], b: &[u8]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    check_grades(a)?;
    check_grades(b)
}

pub fn confusion(preds: &[u8], labels: &[u8]) -> Result<ConfusionMatrix> {
    check_pair(preds, labels)?;
    let mut counts = [[0u64; NUM_GRADES]; NUM_GRADES];
    for (&p, &t) in preds.iter().zip(labels) {
        counts[t as usize][p as usize] += 1;
    }
    Ok(ConfusionMatrix::from_counts(counts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryMetrics {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    /// Share of errors that are off by exactly one grade; absent without errors.
    pub one_grade_off_rate: Option<f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Undefined ratios (no predictions or no support for a class) count as 0.
pub fn summary_metrics(cm: &ConfusionMatrix) -> Result<SummaryMetrics> {
    if cm.n == 0 {
        return Err(Error::EmptyInput);
    }
    let per_class: Vec<ClassMetrics> = (0..NUM_GRADES)
        .map(|k| {
            let tp = cm.counts[k][k];
            let precision = ratio(tp, cm.predicted(k));
            let recall = ratio(tp, cm.support(k));
            ClassMetrics {
                precision,
                recall,
                f1: f1(precision, recall),
                support: cm.support(k),
            }
        })
        .collect();

    let present: Vec<&ClassMetrics> = per_class.iter().filter(|c| c.support > 0).collect();
    let balanced_accuracy = present.iter().map(|c| c.recall).sum::<f64>() / present.len() as f64;
    let n = cm.n as f64;
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        per_class.iter().map(|c| c.support as f64 * f(c)).sum::<f64>() / n
    };

    let mut off = 0u64;
    let mut off_by_one = 0u64;
    for (t, row) in cm.counts.iter().enumerate() {
        for (p, &c) in row.iter().enumerate() {
            if t != p {
                off += c;
                if t.abs_diff(p) == 1 {
                    off_by_one += c;
                }
            }
        }
    }

    Ok(SummaryMetrics {
        accuracy: cm.trace() as f64 / n,
        balanced_accuracy,
        weighted_precision: weighted(|c| c.precision),
        weighted_recall: weighted(|c| c.recall),
        weighted_f1: weighted(|c| c.f1),
        per_class,
        one_grade_off_rate: (off > 0).then(|| off_by_one as f64 / off as f64),
    })
}

/// Quadratic weighted kappa over grades 0..=4.
///
/// When the expected disagreement is zero (both raters constant on the same
/// grade) the result is 1 if the observed disagreement is also zero, else 0.
pub fn qwk(ra: &[u8], rb: &[u8]) -> Result<f64> {
    check_pair(ra, rb)?;
    let k = NUM_GRADES;
    let n = ra.len() as f64;
    let mut observed = [[0.0f64; NUM_GRADES]; NUM_GRADES];
    let mut hist_a = [0.0f64; NUM_GRADES];
    let mut hist_b = [0.0f64; NUM_GRADES];
    for (&a, &b) in ra.iter().zip(rb) {
        observed[a as usize][b as usize] += 1.0;
        hist_a[a as usize] += 1.0;
        hist_b[b as usize] += 1.0;
    }
    let scale = ((k - 1) * (k - 1)) as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..k {
        for j in 0..k {
            let w = (i.abs_diff(j) * i.abs_diff(j)) as f64 / scale;
            num += w * observed[i][j];
            den += w * hist_a[i] * hist_b[j] / n;
        }
    }
    if den == 0.0 {
        return Ok(if num == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(1.0 - num / den)
}

/// Two-class metrics with KL ≥ 2 as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

pub fn binary_oa_from_confusion(cm: &ConfusionMatrix) -> Result<BinaryMetrics> {
    if cm.n == 0 {
        return Err(Error::EmptyInput);
    }
    let pos = OA_POSITIVE_FROM as usize;
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (t, row) in cm.counts.iter().enumerate() {
        for (p, &c) in row.iter().enumerate() {
            match (t >= pos, p >= pos) {
                (true, true) => tp += c,
                (false, true) => fp += c,
                (false, false) => tn += c,
                (true, false) => fn_ += c,
            }
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(BinaryMetrics {
        tp,
        fp,
        tn,
        fn_,
        precision,
        recall,
        f1: f1(precision, recall),
        accuracy: ratio(tp + tn, cm.n),
    })
}

pub fn binary_oa(preds: &[u8], labels: &[u8]) -> Result<BinaryMetrics> {
    binary_oa_from_confusion(&confusion(preds, labels)?)
}

/// Per-rater grades keyed by case id.
pub type Ratings = BTreeMap<String, BTreeMap<String, u8>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementTable {
    pub rater_ids: Vec<String>,
    /// Symmetric, unit diagonal.
    pub kappa: Vec<Vec<f64>>,
}

impl AgreementTable {
    /// `1/κ` for each rater pair; `None` when κ ≤ 0 (the pair is not connected).
    pub fn distances(&self) -> Vec<(usize, usize, Option<f64>)> {
        let n = self.rater_ids.len();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let k = self.kappa[i][j];
                out.push((i, j, (k > 0.0).then(|| 1.0 / k)));
            }
        }
        out
    }

    /// Undirected graph with edge lengths `1/κ`; unconnected pairs are omitted.
    pub fn to_dot(&self) -> String {
        let mut s = String::from("graph agreement {\n");
        for id in &self.rater_ids {
            let _ = writeln!(s, "  \"{id}\";");
        }
        for (i, j, d) in self.distances() {
            if let Some(d) = d {
                let _ = writeln!(
                    s,
                    "  \"{}\" -- \"{}\" [len={d:.4}, label=\"{:.3}\"];",
                    self.rater_ids[i], self.rater_ids[j], self.kappa[i][j]
                );
            }
        }
        s.push_str("}\n");
        s
    }
}

fn aligned(a: &BTreeMap<String, u8>, b: &BTreeMap<String, u8>) -> Result<(Vec<u8>, Vec<u8>)> {
    if !a.keys().eq(b.keys()) {
        return Err(Error::CaseSetMismatch(
            "raters graded different case sets".into(),
        ));
    }
    Ok((a.values().copied().collect(), b.values().copied().collect()))
}

/// Pairwise QWK over raters that graded the same cases.
pub fn agreement_table(ratings: &Ratings) -> Result<AgreementTable> {
    let rater_ids: Vec<String> = ratings.keys().cloned().collect();
    let n = rater_ids.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let values = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (a, b) = aligned(&ratings[&rater_ids[i]], &ratings[&rater_ids[j]])?;
            qwk(&a, &b)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut kappa = vec![vec![0.0; n]; n];
    for (i, row) in kappa.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for (&(i, j), k) in pairs.iter().zip(values) {
        kappa[i][j] = k;
        kappa[j][i] = k;
    }
    Ok(AgreementTable { rater_ids, kappa })
}

/// Delimited text with a `case_id` column and one grade column per rater.
///
/// Empty cells mean the rater did not grade that case.
pub fn read_ratings(reader: impl Read) -> Result<Ratings> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("case_id") || headers.len() < 2 {
        return Err(Error::CaseSetMismatch(
            "expected a case_id column followed by rater columns".into(),
        ));
    }
    let mut ratings: Ratings = headers.iter().skip(1).map(|r| (r.to_string(), BTreeMap::new())).collect();
    let mut seen = BTreeSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let case = rec[0].to_string();
        if !seen.insert(case.clone()) {
            return Err(Error::CaseSetMismatch(format!("duplicate case `{case}`")));
        }
        for (rater, cell) in headers.iter().zip(rec.iter()).skip(1) {
            if cell.is_empty() {
                continue;
            }
            let g: i64 = cell
                .parse()
                .map_err(|_| Error::CaseSetMismatch(format!("case `{case}`: bad grade `{cell}`")))?;
            if !(0..NUM_GRADES as i64).contains(&g) {
                return Err(Error::GradeOutOfRange(g));
            }
            ratings.get_mut(rater).expect("header rater").insert(case.clone(), g as u8);
        }
    }
    Ok(ratings)
}

/// Metrics for one prediction column against the labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterEvaluation {
    pub rater: String,
    pub confusion: ConfusionMatrix,
    pub summary: SummaryMetrics,
    pub binary: BinaryMetrics,
    pub qwk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub cases: usize,
    pub raters: Vec<RaterEvaluation>,
    pub agreement: AgreementTable,
}

/// Scores every rater in `predictions` against `labels` and tabulates pairwise agreement.
pub fn evaluate(predictions: &Ratings, labels: &BTreeMap<String, u8>) -> Result<EvaluationReport> {
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut raters = Vec::new();
    for (id, preds) in predictions {
        let (p, t) = aligned(preds, labels)
            .map_err(|_| Error::CaseSetMismatch(format!("`{id}` does not cover the labelled cases")))?;
        let cm = confusion(&p, &t)?;
        raters.push(RaterEvaluation {
            rater: id.clone(),
            summary: summary_metrics(&cm)?,
            binary: binary_oa_from_confusion(&cm)?,
            qwk: qwk(&p, &t)?,
            confusion: cm,
        });
    }
    let mut all = predictions.clone();
    let mut label_key = "labels".to_string();
    while all.contains_key(&label_key) {
        label_key.push('_');
    }
    all.insert(label_key, labels.clone());
    Ok(EvaluationReport {
        cases: labels.len(),
        raters,
        agreement: agreement_table(&all)?,
    })
}
