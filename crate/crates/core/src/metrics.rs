//! Confusion-matrix statistics, one-vs-rest ROC curves, and rank-based AUC.
//!
//! Recall and sensitivity are the same quantity, `TP / (TP + FN)`; both are
//! reported because both names are in common use. A ratio with a zero
//! denominator is reported as 0 and listed in the class's `undefined` set.

use std::cmp::Ordering;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} labels vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("confusion matrix is empty")]
    Empty,
    #[error("ROC needs at least one positive and one negative sample")]
    OneClass,
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("probability row {row} sums to {sum}, expected 1")]
    RowSum { row: usize, sum: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    /// Row-major; rows are true classes, columns predictions.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), classes * classes);
        Self { classes, counts }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes).map(<[u64]>::to_vec).collect()
    }

    /// `(tp, fp, tn, fn)` for class `c` against the rest.
    pub fn one_vs_rest(&self, c: usize) -> (u64, u64, u64, u64) {
        let tp = self.get(c, c);
        let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
        let col: u64 = (0..self.classes).map(|t| self.get(t, c)).sum();
        let fp = col - tp;
        let fneg = row - tp;
        let tn = self.total() - tp - fp - fneg;
        (tp, fp, tn, fneg)
    }
}

pub fn confusion(
    true_labels: &[usize],
    predicted: &[usize],
    classes: usize,
) -> Result<ConfusionMatrix, MetricsError> {
    if true_labels.len() != predicted.len() {
        return Err(MetricsError::LengthMismatch(true_labels.len(), predicted.len()));
    }
    let mut counts = vec![0u64; classes * classes];
    for (&t, &p) in true_labels.iter().zip(predicted) {
        for label in [t, p] {
            if label >= classes {
                return Err(MetricsError::LabelOutOfRange { label, classes });
            }
        }
        counts[t * classes + p] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    /// Same value as `recall`.
    pub sensitivity: f64,
    pub specificity: f64,
    pub support: u64,
    /// Names of metrics whose denominator was zero.
    pub undefined: Vec<&'static str>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: MacroMetrics,
}

fn ratio(num: u64, den: u64, name: &'static str, undefined: &mut Vec<&'static str>) -> f64 {
    if den == 0 {
        undefined.push(name);
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn report(cm: &ConfusionMatrix) -> Result<EvalReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let per_class: Vec<ClassMetrics> = (0..cm.classes())
        .map(|c| {
            let (tp, fp, tn, fneg) = cm.one_vs_rest(c);
            let mut undefined = Vec::new();
            let precision = ratio(tp, tp + fp, "precision", &mut undefined);
            let recall = ratio(tp, tp + fneg, "recall", &mut undefined);
            if tp + fneg == 0 {
                undefined.push("sensitivity");
            }
            let specificity = ratio(tn, tn + fp, "specificity", &mut undefined);
            ClassMetrics {
                class: c,
                precision,
                recall,
                sensitivity: recall,
                specificity,
                support: tp + fneg,
                undefined,
            }
        })
        .collect();
    let k = per_class.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k;
    let macro_avg = MacroMetrics {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        sensitivity: mean(|m| m.sensitivity),
        specificity: mean(|m| m.specificity),
    };
    Ok(EvalReport {
        confusion: cm.clone(),
        accuracy: cm.trace() as f64 / total as f64,
        per_class,
        macro_avg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    /// Samples with score `>= threshold` are called positive.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub class: usize,
    /// Starts at `(0, 0)` with threshold `+∞` and ends at `(1, 1)`.
    pub points: Vec<RocPoint>,
    /// Rank-statistic AUC.
    pub auc: f64,
}

fn check_binary(scores: &[f64], is_positive: &[bool]) -> Result<(u64, u64), MetricsError> {
    if scores.len() != is_positive.len() {
        return Err(MetricsError::LengthMismatch(is_positive.len(), scores.len()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite(i));
    }
    let pos = is_positive.iter().filter(|&&p| p).count() as u64;
    let neg = is_positive.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::OneClass);
    }
    Ok((pos, neg))
}

/// Sample indices ordered by score, descending.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Tie-aware ROC curve: one point per distinct score, samples with equal
/// scores enter together.
pub fn roc_curve(scores: &[f64], is_positive: &[bool]) -> Result<RocCurve, MetricsError> {
    let (pos, neg) = check_binary(scores, is_positive)?;
    let order = descending(scores);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if is_positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(RocCurve {
        class: 0,
        points,
        auc: auc(scores, is_positive)?,
    })
}

/// Mann–Whitney AUC: `(#{pos > neg} + ½·#{pos = neg}) / (P·N)`.
pub fn auc(scores: &[f64], is_positive: &[bool]) -> Result<f64, MetricsError> {
    let (pos, neg) = check_binary(scores, is_positive)?;
    let mut order = descending(scores);
    order.reverse();
    // doubled numerator keeps the half-credit for ties exact
    let mut twice_wins: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut p_here, mut n_here) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == s {
            if is_positive[order[i]] {
                p_here += 1;
            } else {
                n_here += 1;
            }
            i += 1;
        }
        twice_wins += 2 * p_here * neg_below + p_here * n_here;
        neg_below += n_here;
    }
    Ok(twice_wins as f64 / (2 * pos * neg) as f64)
}

/// Trapezoidal area under the curve's points.
pub fn trapezoid_area(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// One-vs-rest curves, one per class. A class with no members (or with
/// every sample as a member) gets `None`.
pub fn multiclass_roc(probabilities: &[Vec<f64>], labels: &[usize]) -> Result<Vec<Option<RocCurve>>, MetricsError> {
    if probabilities.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(labels.len(), probabilities.len()));
    }
    let classes = probabilities.first().map_or(0, Vec::len);
    for (row, p) in probabilities.iter().enumerate() {
        let sum: f64 = p.iter().sum();
        if p.len() != classes || (sum - 1.0).abs() > 1e-6 {
            return Err(MetricsError::RowSum { row, sum });
        }
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(MetricsError::LabelOutOfRange { label, classes });
    }
    (0..classes)
        .map(|c| {
            let scores: Vec<f64> = probabilities.iter().map(|p| p[c]).collect();
            let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            match roc_curve(&scores, &positive) {
                Ok(mut curve) => {
                    curve.class = c;
                    Ok(Some(curve))
                }
                Err(MetricsError::OneClass) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// `class,threshold,fpr,tpr` rows; the sentinel threshold prints as `inf`.
pub fn roc_csv(curves: &[Option<RocCurve>]) -> String {
    let mut out = String::from("class,threshold,fpr,tpr\n");
    for curve in curves.iter().flatten() {
        for p in &curve.points {
            out.push_str(&format!("{},{:?},{:?},{:?}\n", curve.class, p.threshold, p.fpr, p.tpr));
        }
    }
    out
}

#[derive(Debug, Serialize)]
struct ClassJson<'a> {
    name: &'a str,
    #[serde(flatten)]
    metrics: &'a ClassMetrics,
}

#[derive(Debug, Serialize)]
struct AucJson<'a> {
    class: usize,
    name: &'a str,
    auc: Option<f64>,
}

#[derive(Debug, Serialize)]
struct MetricsJson<'a> {
    accuracy: f64,
    per_class: Vec<ClassJson<'a>>,
    #[serde(rename = "macro")]
    macro_avg: &'a MacroMetrics,
    auc: Vec<AucJson<'a>>,
}

/// Metrics JSON with keys in the order `accuracy, per_class, macro, auc`.
pub fn metrics_json(report: &EvalReport, curves: &[Option<RocCurve>], class_names: &[&str]) -> String {
    let name = |c: usize| class_names.get(c).copied().unwrap_or("");
    let doc = MetricsJson {
        accuracy: report.accuracy,
        per_class: report
            .per_class
            .iter()
            .map(|m| ClassJson {
                name: name(m.class),
                metrics: m,
            })
            .collect(),
        macro_avg: &report.macro_avg,
        auc: curves
            .iter()
            .enumerate()
            .map(|(c, curve)| AucJson {
                class: c,
                name: name(c),
                auc: curve.as_ref().map(|k| k.auc),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("serializable");
    s.push('\n');
    s
}
