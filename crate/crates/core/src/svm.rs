//! Linear support vector machine trained one-vs-rest.
//!
//! Each binary problem minimises `0.5 * |w|^2 + C * sum(hinge(y_i * (w.x_i + b)))`
//! by dual coordinate descent. The bias is an extra constant feature and is
//! regularised together with `w`. Inputs are standardised with statistics
//! estimated on the training matrix.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::metrics::argmax;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SvmError {
    #[error("empty training matrix")]
    Empty,
    #[error("{rows} rows but {labels} labels")]
    LabelCount { rows: usize, labels: usize },
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("non-finite feature value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("binary labels must be +1 or -1, got {0}")]
    BadBinaryLabel(f64),
    #[error("expected {expected} features, got {got}")]
    FeatureCount { expected: usize, got: usize },
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid parameter: {0}")]
    Params(&'static str),
    #[error("malformed model text at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Per-feature mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Constant columns get scale 1, so they standardise to zero.
    pub fn fit(x: ArrayView2<'_, f64>) -> Result<Self, SvmError> {
        let (rows, cols) = x.dim();
        if rows == 0 || cols == 0 {
            return Err(SvmError::Empty);
        }
        check_finite(x)?;
        let n = rows as f64;
        let mut mean = vec![0.0; cols];
        let mut scale = vec![0.0; cols];
        for (j, col) in x.axis_iter(Axis(1)).enumerate() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            mean[j] = m;
            scale[j] = if sd > 1e-12 * m.abs().max(1.0) {
                sd
            } else {
                1.0
            };
        }
        Ok(Self { mean, scale })
    }

    pub fn features(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>, SvmError> {
        self.check(x.ncols())?;
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn inverse_transform(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>, SvmError> {
        self.check(z.ncols())?;
        let mut out = z.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = *v * s + m;
            }
        }
        Ok(out)
    }

    fn check(&self, cols: usize) -> Result<(), SvmError> {
        if cols == self.features() {
            Ok(())
        } else {
            Err(SvmError::FeatureCount {
                expected: self.features(),
                got: cols,
            })
        }
    }
}

fn check_finite(x: ArrayView2<'_, f64>) -> Result<(), SvmError> {
    for ((row, col), v) in x.indexed_iter() {
        if !v.is_finite() {
            return Err(SvmError::NonFinite { row, col });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmParams {
    pub c: f64,
    pub tolerance: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            tolerance: 1e-4,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

impl SvmParams {
    fn validate(&self) -> Result<(), SvmError> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(SvmError::Params("C must be positive"));
        }
        if !(self.tolerance > 0.0) {
            return Err(SvmError::Params("tolerance must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(SvmError::Params("max_epochs must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl BinaryModel {
    pub fn decision(&self, x: ArrayView1<'_, f64>) -> f64 {
        x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.bias
    }
}

/// Per-epoch solver diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    /// Primal objective of the returned iterate after each epoch.
    pub objective: Vec<f64>,
    /// Primal objective of the raw dual iterate after each epoch.
    pub raw_objective: Vec<f64>,
    pub converged: bool,
}

fn primal_objective(x: ArrayView2<'_, f64>, y: &[f64], w: &[f64], b: f64, c: f64) -> f64 {
    let reg = 0.5 * (w.iter().map(|v| v * v).sum::<f64>() + b * b);
    let loss: f64 = x
        .rows()
        .into_iter()
        .zip(y)
        .map(|(row, &yi)| {
            let f = row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b;
            (1.0 - yi * f).max(0.0)
        })
        .sum();
    reg + c * loss
}

/// Trains one binary classifier on already-scaled features.
///
/// Dual coordinate descent over the box `0 <= alpha_i <= C`, visiting
/// coordinates in one seeded shuffled order every epoch. Stops when the spread
/// of projected gradients drops below `tolerance` or after `max_epochs`.
/// Returns the iterate with the lowest primal objective seen at an epoch
/// boundary, so the traced objective never increases.
pub fn train_binary(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    params: &SvmParams,
) -> Result<(BinaryModel, TrainTrace), SvmError> {
    params.validate()?;
    let (rows, cols) = x.dim();
    if rows == 0 {
        return Err(SvmError::Empty);
    }
    if rows != y.len() {
        return Err(SvmError::LabelCount {
            rows,
            labels: y.len(),
        });
    }
    if let Some(&bad) = y.iter().find(|&&v| v != 1.0 && v != -1.0) {
        return Err(SvmError::BadBinaryLabel(bad));
    }
    if !(y.contains(&1.0) && y.contains(&-1.0)) {
        return Err(SvmError::SingleClass);
    }
    check_finite(x)?;

    let c = params.c;
    // Diagonal of Q including the constant bias feature.
    let qd: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r) + 1.0).collect();
    let mut alpha = vec![0.0; rows];
    let mut w = vec![0.0; cols];
    let mut b = 0.0;

    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(params.seed));

    let mut trace = TrainTrace::default();
    let mut best = (primal_objective(x, y, &w, b, c), w.clone(), b);

    for _ in 0..params.max_epochs {
        let mut pg_max = f64::NEG_INFINITY;
        let mut pg_min = f64::INFINITY;
        for &i in &order {
            let row = x.row(i);
            let yi = y[i];
            let f = row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let g = yi * f - 1.0;
            let pg = if alpha[i] <= 0.0 {
                g.min(0.0)
            } else if alpha[i] >= c {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg.abs() > 1e-12 {
                let old = alpha[i];
                alpha[i] = (old - g / qd[i]).clamp(0.0, c);
                let step = (alpha[i] - old) * yi;
                for (wj, xj) in w.iter_mut().zip(row.iter()) {
                    *wj += step * xj;
                }
                b += step;
            }
        }
        let obj = primal_objective(x, y, &w, b, c);
        trace.raw_objective.push(obj);
        if obj < best.0 {
            best = (obj, w.clone(), b);
        }
        trace.objective.push(best.0);
        if pg_max - pg_min < params.tolerance {
            trace.converged = true;
            break;
        }
    }

    let (_, weights, bias) = best;
    Ok((BinaryModel { weights, bias }, trace))
}

/// One-vs-rest model over standardised features.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub classes: usize,
    pub weights: Array2<f64>,
    pub biases: Vec<f64>,
    pub standardizer: Standardizer,
}

impl SvmModel {
    pub fn features(&self) -> usize {
        self.weights.ncols()
    }

    /// `score(i, k) = w_k . standardize(x_i) + b_k`
    pub fn decision_scores(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>, SvmError> {
        let z = self.standardizer.transform(x)?;
        let mut scores = z.dot(&self.weights.t());
        for mut row in scores.rows_mut() {
            for (s, b) in row.iter_mut().zip(&self.biases) {
                *s += b;
            }
        }
        Ok(scores)
    }

    /// Argmax of the decision scores, ties to the lowest class index.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>, SvmError> {
        Ok(predict_from_scores(self.decision_scores(x)?.view()))
    }

    /// Text format: `svm v1 K D`, then K lines of D weights followed by the
    /// bias, then the standardizer mean line and scale line.
    pub fn to_text(&self) -> String {
        let mut out = format!("svm v1 {} {}\n", self.classes, self.features());
        let line = |out: &mut String, vals: &mut dyn Iterator<Item = f64>| {
            let parts: Vec<String> = vals.map(fmt17).collect();
            out.push_str(&parts.join(" "));
            out.push('\n');
        };
        for (k, row) in self.weights.rows().into_iter().enumerate() {
            line(
                &mut out,
                &mut row.iter().copied().chain(std::iter::once(self.biases[k])),
            );
        }
        line(&mut out, &mut self.standardizer.mean.iter().copied());
        line(&mut out, &mut self.standardizer.scale.iter().copied());
        out
    }

    pub fn from_text(text: &str) -> Result<Self, SvmError> {
        let err = |line: usize, reason: &str| SvmError::Parse {
            line,
            reason: reason.to_string(),
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| err(1, "empty"))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        if head.len() != 4 || head[0] != "svm" || head[1] != "v1" {
            return Err(err(1, "expected `svm v1 K D`"));
        }
        let classes: usize = head[2].parse().map_err(|_| err(1, "bad K"))?;
        let dim: usize = head[3].parse().map_err(|_| err(1, "bad D"))?;
        let mut numbers = |expected: usize| -> Result<Vec<f64>, SvmError> {
            let (i, l) = lines.next().ok_or_else(|| err(0, "truncated"))?;
            let vals = l
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| err(i + 1, &e.to_string()))?;
            if vals.len() != expected {
                return Err(err(i + 1, &format!("expected {expected} values")));
            }
            Ok(vals)
        };
        let mut weights = Array2::zeros((classes, dim));
        let mut biases = Vec::with_capacity(classes);
        for k in 0..classes {
            let vals = numbers(dim + 1)?;
            weights.row_mut(k).assign(&ArrayView1::from(&vals[..dim]));
            biases.push(vals[dim]);
        }
        let mean = numbers(dim)?;
        let scale = numbers(dim)?;
        Ok(Self {
            classes,
            weights,
            biases,
            standardizer: Standardizer { mean, scale },
        })
    }
}

/// Scientific notation with 17 significant digits; parses back exactly.
pub fn fmt17(v: f64) -> String {
    let mut s = String::new();
    write!(s, "{v:.16e}").expect("write to String");
    s
}

pub fn predict_from_scores(scores: ArrayView2<'_, f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|r| argmax(r.iter().copied()))
        .collect()
}

/// Trains `classes` one-vs-rest problems.
///
/// A class with no training samples gets a constant scorer (`w = 0`,
/// `b = -1`) that never wins against a trained class.
pub fn train_ovr_k(
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    classes: usize,
    params: &SvmParams,
) -> Result<SvmModel, SvmError> {
    let (rows, cols) = x.dim();
    if rows == 0 || cols == 0 {
        return Err(SvmError::Empty);
    }
    if rows != labels.len() {
        return Err(SvmError::LabelCount {
            rows,
            labels: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(SvmError::LabelOutOfRange { label, classes });
    }
    let mut present = vec![false; classes];
    for &l in labels {
        present[l] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(SvmError::SingleClass);
    }

    let standardizer = Standardizer::fit(x)?;
    let z = standardizer.transform(x)?;
    let mut weights = Array2::zeros((classes, cols));
    let mut biases = vec![-1.0; classes];
    for k in (0..classes).filter(|&k| present[k]) {
        let y: Vec<f64> = labels
            .iter()
            .map(|&l| if l == k { 1.0 } else { -1.0 })
            .collect();
        // Same seed for every class keeps the two K=2 problems mirrored.
        let (model, _) = train_binary(z.view(), &y, params)?;
        weights.row_mut(k).assign(&Array1::from(model.weights));
        biases[k] = model.bias;
    }
    Ok(SvmModel {
        classes,
        weights,
        biases,
        standardizer,
    })
}

/// [`train_ovr_k`] with the class count inferred as `max(label) + 1`.
pub fn train_ovr(
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    params: &SvmParams,
) -> Result<SvmModel, SvmError> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    train_ovr_k(x, labels, classes, params)
}
