//! Classification metrics.
//!
//! Multi-class confusion matrices, their one-vs-rest decomposition into
//! per-class [`ClassConfusion`] counts, the rate formulas (accuracy,
//! sensitivity, specificity, geometric mean), rank-based AUC and RMSE.
//!
//! Counts are stored as `f64` so that confusions averaged over several runs
//! (which carry fractional entries) go through the same formulas as raw ones.
//! Rates with a zero denominator are reported as [`MetricError::Undefined`]
//! rather than coerced to zero.

use std::cmp::Ordering;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("label sequences differ in length ({actual} actual, {predicted} predicted)")]
    LengthMismatch { actual: usize, predicted: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("{metric} is undefined: {reason}")]
    Undefined {
        metric: &'static str,
        reason: &'static str,
    },
    #[error("nothing to aggregate")]
    Empty,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("counts must be finite and non-negative")]
    InvalidCount,
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// One-vs-rest counts for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassConfusion {
    #[serde(rename = "tp")]
    pub true_pos: f64,
    #[serde(rename = "tn")]
    pub true_neg: f64,
    #[serde(rename = "fp")]
    pub false_pos: f64,
    #[serde(rename = "fn")]
    pub false_neg: f64,
}

impl ClassConfusion {
    pub fn new(true_pos: f64, true_neg: f64, false_pos: f64, false_neg: f64) -> Result<Self> {
        let c = Self {
            true_pos,
            true_neg,
            false_pos,
            false_neg,
        };
        if [true_pos, true_neg, false_pos, false_neg]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
        {
            Ok(c)
        } else {
            Err(MetricError::InvalidCount)
        }
    }

    pub fn total(&self) -> f64 {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }

    /// (TP + TN) / (TP + TN + FP + FN)
    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total <= 0.0 {
            return Err(MetricError::Undefined {
                metric: "accuracy",
                reason: "confusion is empty",
            });
        }
        Ok((self.true_pos + self.true_neg) / total)
    }

    /// TP / (TP + FN)
    pub fn sensitivity(&self) -> Result<f64> {
        let positives = self.true_pos + self.false_neg;
        if positives <= 0.0 {
            return Err(MetricError::Undefined {
                metric: "sensitivity",
                reason: "no actual positives",
            });
        }
        Ok(self.true_pos / positives)
    }

    /// TN / (TN + FP)
    pub fn specificity(&self) -> Result<f64> {
        let negatives = self.true_neg + self.false_pos;
        if negatives <= 0.0 {
            return Err(MetricError::Undefined {
                metric: "specificity",
                reason: "no actual negatives",
            });
        }
        Ok(self.true_neg / negatives)
    }

    /// Square root of sensitivity times specificity.
    pub fn geometric_mean(&self) -> Result<f64> {
        Ok((self.sensitivity()? * self.specificity()?).sqrt())
    }
}

/// Component-wise arithmetic mean of per-class confusions.
///
/// Rates of the result are the "mean of counts, then rates" aggregate.
pub fn aggregate_confusions(per_class: &[ClassConfusion]) -> Result<ClassConfusion> {
    if per_class.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = per_class.len() as f64;
    let mut sum = [0.0; 4];
    for c in per_class {
        sum[0] += c.true_pos;
        sum[1] += c.true_neg;
        sum[2] += c.false_pos;
        sum[3] += c.false_neg;
    }
    ClassConfusion::new(sum[0] / n, sum[1] / n, sum[2] / n, sum[3] / n)
}

/// K x K confusion matrix. Entry `(i, j)` counts samples of actual class `i`
/// predicted as class `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassConfusion {
    classes: usize,
    counts: Vec<f64>,
}

impl MulticlassConfusion {
    pub fn zeros(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0.0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        let mut counts = Vec::with_capacity(k * k);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(MetricError::ShapeMismatch(format!(
                    "row {i} has {} entries, expected {k}",
                    row.len()
                )));
            }
            for &v in row {
                if !v.is_finite() || v < 0.0 {
                    return Err(MetricError::InvalidCount);
                }
                counts.push(v);
            }
        }
        Ok(Self { classes: k, counts })
    }

    /// Count (actual, predicted) pairs.
    pub fn from_labels(actual: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if actual.len() != predicted.len() {
            return Err(MetricError::LengthMismatch {
                actual: actual.len(),
                predicted: predicted.len(),
            });
        }
        let mut m = Self::zeros(classes);
        for (&a, &p) in actual.iter().zip(predicted) {
            for label in [a, p] {
                if label >= classes {
                    return Err(MetricError::LabelOutOfRange { label, classes });
                }
            }
            m.counts[a * classes + p] += 1.0;
        }
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, actual: usize, predicted: usize) -> f64 {
        self.counts[actual * self.classes + predicted]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.counts
            .chunks(self.classes.max(1))
            .take(self.classes)
            .map(<[f64]>::to_vec)
            .collect()
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        (0..self.classes).map(|j| self.get(i, j)).sum()
    }

    pub fn col_sum(&self, j: usize) -> f64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// One-vs-rest counts for `class_index`.
    pub fn one_vs_rest(&self, class_index: usize) -> Result<ClassConfusion> {
        if class_index >= self.classes {
            return Err(MetricError::ClassOutOfRange {
                index: class_index,
                classes: self.classes,
            });
        }
        let tp = self.get(class_index, class_index);
        let false_neg = self.row_sum(class_index) - tp;
        let false_pos = self.col_sum(class_index) - tp;
        let true_neg = self.total() - tp - false_neg - false_pos;
        // Clamp rounding residue from fractional counts.
        ClassConfusion::new(
            tp,
            true_neg.max(0.0),
            false_pos.max(0.0),
            false_neg.max(0.0),
        )
    }

    pub fn one_vs_rest_all(&self) -> Vec<ClassConfusion> {
        (0..self.classes)
            .map(|k| self.one_vs_rest(k).expect("index in range"))
            .collect()
    }

    /// Entry-wise mean of several matrices of identical shape.
    pub fn average_runs(matrices: &[MulticlassConfusion]) -> Result<Self> {
        let first = matrices.first().ok_or(MetricError::Empty)?;
        let mut sum = vec![0.0; first.counts.len()];
        for m in matrices {
            if m.classes != first.classes {
                return Err(MetricError::ShapeMismatch(format!(
                    "{} classes vs {}",
                    m.classes, first.classes
                )));
            }
            for (s, v) in sum.iter_mut().zip(&m.counts) {
                *s += v;
            }
        }
        let n = matrices.len() as f64;
        Ok(Self {
            classes: first.classes,
            counts: sum.into_iter().map(|v| v / n).collect(),
        })
    }

    /// Apply `f` to every entry, e.g. to round to a printed precision.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            classes: self.classes,
            counts: self.counts.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Area under the ROC curve of `scores` for a binary split.
///
/// Computed from average ranks (Mann-Whitney U): the probability that a
/// random positive outscores a random negative, with ties credited 0.5.
pub fn auc_ovr(scores: &[f64], is_positive: &[bool]) -> Result<f64> {
    if scores.len() != is_positive.len() {
        return Err(MetricError::LengthMismatch {
            actual: is_positive.len(),
            predicted: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricError::Undefined {
            metric: "auc",
            reason: "NaN score",
        });
    }
    let n_pos = is_positive.iter().filter(|&&p| p).count();
    let n_neg = is_positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Undefined {
            metric: "auc",
            reason: "needs both positive and negative samples",
        });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len()
            && scores[order[end]].partial_cmp(&scores[order[start]]) == Some(Ordering::Equal)
        {
            end += 1;
        }
        // Ranks are 1-based; tied block shares the average rank.
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        let pos_in_block = order[start..end]
            .iter()
            .filter(|&&i| is_positive[i])
            .count();
        rank_sum_pos += avg_rank * pos_in_block as f64;
        start = end;
    }
    let n_pos_f = n_pos as f64;
    let u = rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0;
    Ok(u / (n_pos_f * n_neg as f64))
}

/// Root mean squared difference between one-hot targets and `scores`,
/// averaged over every sample and class.
pub fn rmse(scores: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    let (rows, classes) = scores.dim();
    if rows != labels.len() {
        return Err(MetricError::ShapeMismatch(format!(
            "{rows} score rows vs {} labels",
            labels.len()
        )));
    }
    if rows == 0 || classes == 0 {
        return Err(MetricError::Empty);
    }
    let mut sum = 0.0;
    for (row, &label) in scores.rows().into_iter().zip(labels) {
        if label >= classes {
            return Err(MetricError::LabelOutOfRange { label, classes });
        }
        for (k, &s) in row.iter().enumerate() {
            let target = if k == label { 1.0 } else { 0.0 };
            sum += (target - s).powi(2);
        }
    }
    Ok((sum / (rows * classes) as f64).sqrt())
}

/// Rates derived from one confusion; `None` marks an undefined rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub gmean: Option<f64>,
}

impl Rates {
    pub fn of(c: &ClassConfusion) -> Self {
        Self {
            accuracy: c.accuracy().ok(),
            sensitivity: c.sensitivity().ok(),
            specificity: c.specificity().ok(),
            gmean: c.geometric_mean().ok(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    #[serde(flatten)]
    pub confusion: ClassConfusion,
    #[serde(flatten)]
    pub rates: Rates,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    #[serde(flatten)]
    pub confusion: ClassConfusion,
    #[serde(flatten)]
    pub rates: Rates,
    pub auc: Option<f64>,
    pub rmse: Option<f64>,
}

/// Per-class and aggregate metrics for one confusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
    pub aggregate: AggregateMetrics,
}

impl MetricReport {
    /// `auc` holds one entry per class; the aggregate AUC is the mean of the
    /// defined entries.
    pub fn from_confusion(
        m: &MulticlassConfusion,
        auc: &[Option<f64>],
        rmse: Option<f64>,
    ) -> Result<Self> {
        if auc.len() != m.classes() {
            return Err(MetricError::ShapeMismatch(format!(
                "{} AUC entries for {} classes",
                auc.len(),
                m.classes()
            )));
        }
        let per_class: Vec<ClassMetrics> = m
            .one_vs_rest_all()
            .into_iter()
            .zip(auc)
            .map(|(confusion, &auc)| ClassMetrics {
                confusion,
                rates: Rates::of(&confusion),
                auc,
            })
            .collect();
        let confusion =
            aggregate_confusions(&per_class.iter().map(|c| c.confusion).collect::<Vec<_>>())?;
        Ok(Self {
            aggregate: AggregateMetrics {
                confusion,
                rates: Rates::of(&confusion),
                auc: mean_defined(auc),
                rmse,
            },
            per_class,
        })
    }
}

/// Mean of the `Some` entries, `None` if there are none.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in row.into_iter().enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}
