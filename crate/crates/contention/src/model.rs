//! L2-regularized logistic regression with feature standardization,
//! deterministic stratified cross-validation, macro-averaged metrics, and
//! fold-paired significance testing.
//!
//! The optimizer is full-batch gradient descent with backtracking line
//! search. That is slower than quasi-Newton methods but bit-reproducible
//! from a fixed start, which matters more at this corpus scale.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::Label;
use crate::featurize::FeatureVector;

pub const MODEL_VERSION: u32 = 1;

/// Significance threshold for paired fold comparisons.
pub const ALPHA: f64 = 0.05;

const GRAD_TOLERANCE: f64 = 1e-6;
const MAX_ITERATIONS: usize = 5000;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("training needs at least one example of each class")]
    SingleClass,
    #[error("feature {0:?} has a non-finite value")]
    NonFinite(String),
    #[error("features and labels disagree in length: {x} vs {y}")]
    LengthMismatch { x: usize, y: usize },
    #[error("empty input")]
    Empty,
    #[error("lambda must be >= 0 and finite, got {0}")]
    BadLambda(f64),
    #[error("class {class} has {count} examples, fewer than {k} folds")]
    ClassTooSmall {
        class: &'static str,
        count: usize,
        k: usize,
    },
    #[error("reports use different fold assignments and cannot be paired")]
    FoldMismatch,
}

/// Logistic regression parameters plus the standardization fitted on the
/// training data. Zero-variance features keep std 1 so standardization
/// never divides by zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedModel {
    pub feature_names: Vec<String>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub seed: u64,
    pub version: u32,
}

fn label_to_y(label: Label) -> f64 {
    match label {
        Label::Contentious => 1.0,
        Label::NonContentious => 0.0,
    }
}

/// ln(1 + e^z) without overflow for large |z|.
fn ln_1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean negative log-likelihood plus (lambda/2)·‖coefficients‖². The weight
/// layout is [intercept, coefficients...]; the intercept is unpenalized.
pub fn nll_objective(weights: &[f64], rows: &[Vec<f64>], y: &[f64], lambda: f64) -> f64 {
    let n = rows.len() as f64;
    let mut total = 0.0;
    for (row, yi) in rows.iter().zip(y) {
        let z: f64 = weights[0]
            + row
                .iter()
                .zip(&weights[1..])
                .map(|(x, w)| x * w)
                .sum::<f64>();
        total += ln_1p_exp(z) - yi * z;
    }
    let penalty: f64 = weights[1..].iter().map(|w| w * w).sum::<f64>();
    total / n + 0.5 * lambda * penalty
}

/// Analytic gradient of [`nll_objective`] in the same [intercept, coefs]
/// layout. The regularizer contributes lambda·coef to coefficient entries
/// and nothing to the intercept.
pub fn nll_gradient(weights: &[f64], rows: &[Vec<f64>], y: &[f64], lambda: f64) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut grad = vec![0.0; weights.len()];
    for (row, yi) in rows.iter().zip(y) {
        let z: f64 = weights[0]
            + row
                .iter()
                .zip(&weights[1..])
                .map(|(x, w)| x * w)
                .sum::<f64>();
        let residual = sigmoid(z) - yi;
        grad[0] += residual;
        for (g, x) in grad[1..].iter_mut().zip(row) {
            *g += residual * x;
        }
    }
    for g in grad.iter_mut() {
        *g /= n;
    }
    for (g, w) in grad[1..].iter_mut().zip(&weights[1..]) {
        *g += lambda * w;
    }
    grad
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Gradient descent with Armijo backtracking from the zero vector. Returns
/// the weights and the objective value after every accepted step, which lets
/// tests check monotone descent.
fn minimize(rows: &[Vec<f64>], y: &[f64], lambda: f64, dims: usize) -> (Vec<f64>, Vec<f64>) {
    let mut weights = vec![0.0; dims + 1];
    let mut objective = nll_objective(&weights, rows, y, lambda);
    let mut trace = vec![objective];
    for _ in 0..MAX_ITERATIONS {
        let grad = nll_gradient(&weights, rows, y, lambda);
        if inf_norm(&grad) < GRAD_TOLERANCE {
            break;
        }
        let grad_sq: f64 = grad.iter().map(|g| g * g).sum();
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let candidate: Vec<f64> = weights
                .iter()
                .zip(&grad)
                .map(|(w, g)| w - step * g)
                .collect();
            let value = nll_objective(&candidate, rows, y, lambda);
            if value <= objective - 1e-4 * step * grad_sq {
                weights = candidate;
                objective = value;
                trace.push(value);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No step of any tried length improves the objective; the
            // iterate is at float-precision optimum.
            break;
        }
    }
    (weights, trace)
}

/// Collects the sorted union of flat feature names across all vectors.
pub fn feature_union(x: &[FeatureVector]) -> Vec<String> {
    let mut names = BTreeSet::new();
    for vector in x {
        for name in vector.flat().keys() {
            names.insert(name.clone());
        }
    }
    names.into_iter().collect()
}

fn densify(
    x: &[FeatureVector],
    names: &[String],
) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut rows = Vec::with_capacity(x.len());
    for vector in x {
        let flat = vector.flat();
        let mut row = Vec::with_capacity(names.len());
        for name in names {
            let value = flat.get(name).copied().unwrap_or(0.0);
            if !value.is_finite() {
                return Err(ModelError::NonFinite(name.clone()));
            }
            row.push(value);
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn train(
    x: &[FeatureVector],
    y: &[Label],
    lambda: f64,
    seed: u64,
) -> Result<TrainedModel, ModelError> {
    if x.len() != y.len() {
        return Err(ModelError::LengthMismatch { x: x.len(), y: y.len() });
    }
    if x.is_empty() {
        return Err(ModelError::Empty);
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(ModelError::BadLambda(lambda));
    }
    let positives = y.iter().filter(|l| **l == Label::Contentious).count();
    if positives == 0 || positives == y.len() {
        return Err(ModelError::SingleClass);
    }

    let names = feature_union(x);
    let mut rows = densify(x, &names)?;
    let n = rows.len() as f64;

    let mut means = vec![0.0; names.len()];
    let mut stds = vec![1.0; names.len()];
    for j in 0..names.len() {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        means[j] = mean;
        stds[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    for row in rows.iter_mut() {
        for j in 0..row.len() {
            row[j] = (row[j] - means[j]) / stds[j];
        }
    }

    let targets: Vec<f64> = y.iter().map(|l| label_to_y(*l)).collect();
    let (weights, _) = minimize(&rows, &targets, lambda, names.len());

    Ok(TrainedModel {
        feature_names: names,
        means,
        stds,
        coefficients: weights[1..].to_vec(),
        intercept: weights[0],
        lambda,
        seed,
        version: MODEL_VERSION,
    })
}

/// Probability of the contentious class. Features the vector lacks count as
/// 0 before standardization. Clamped away from exact 0 and 1 so downstream
/// log-odds stay finite.
pub fn predict_proba(model: &TrainedModel, x: &FeatureVector) -> f64 {
    let mut z = model.intercept;
    for (j, name) in model.feature_names.iter().enumerate() {
        let raw = x.get(name).unwrap_or(0.0);
        z += model.coefficients[j] * (raw - model.means[j]) / model.stds[j];
    }
    sigmoid(z).clamp(1e-12, 1.0 - 1e-12)
}

/// Thresholds probability at 0.5. A tie at exactly 0.5 predicts
/// non-contentious.
pub fn predict(model: &TrainedModel, x: &FeatureVector) -> Label {
    if predict_proba(model, x) > 0.5 {
        Label::Contentious
    } else {
        Label::NonContentious
    }
}

/// Deals each class's examples round-robin into k folds after a seeded
/// shuffle, so per-fold class counts stay within one of proportional.
pub fn stratified_folds(y: &[Label], k: usize, seed: u64) -> Result<Vec<usize>, ModelError> {
    if y.is_empty() || k == 0 {
        return Err(ModelError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0usize; y.len()];
    for class in [Label::NonContentious, Label::Contentious] {
        let mut members: Vec<usize> = (0..y.len()).filter(|i| y[*i] == class).collect();
        if members.len() < k {
            return Err(ModelError::ClassTooSmall {
                class: match class {
                    Label::Contentious => "contentious",
                    Label::NonContentious => "non_contentious",
                },
                count: members.len(),
                k,
            });
        }
        members.shuffle(&mut rng);
        for (deal, index) in members.into_iter().enumerate() {
            folds[index] = deal % k;
        }
    }
    Ok(folds)
}

/// Accuracy plus macro-averaged precision, recall, and F1 over the two
/// classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn metrics(y_true: &[Label], y_pred: &[Label]) -> Result<Metrics, ModelError> {
    if y_true.is_empty() {
        return Err(ModelError::Empty);
    }
    if y_true.len() != y_pred.len() {
        return Err(ModelError::LengthMismatch { x: y_true.len(), y: y_pred.len() });
    }
    let correct = y_true
        .iter()
        .zip(y_pred)
        .filter(|(t, p)| t == p)
        .count();
    let accuracy = correct as f64 / y_true.len() as f64;

    let mut precision_sum = 0.0;
    let mut recall_sum = 0.0;
    let mut f1_sum = 0.0;
    for class in [Label::NonContentious, Label::Contentious] {
        let tp = y_true
            .iter()
            .zip(y_pred)
            .filter(|(t, p)| **t == class && **p == class)
            .count() as f64;
        let pred_pos = y_pred.iter().filter(|p| **p == class).count() as f64;
        let true_pos = y_true.iter().filter(|t| **t == class).count() as f64;
        // A class absent from both sides contributes 0 by convention.
        let precision = if pred_pos > 0.0 { tp / pred_pos } else { 0.0 };
        let recall = if true_pos > 0.0 { tp / true_pos } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        precision_sum += precision;
        recall_sum += recall;
        f1_sum += f1;
    }
    Ok(Metrics {
        accuracy,
        precision: precision_sum / 2.0,
        recall: recall_sum / 2.0,
        f1: f1_sum / 2.0,
    })
}

/// Unweighted mean of per-fold metrics.
pub fn mean_metrics_of(folds: &[Metrics]) -> Metrics {
    let n = folds.len() as f64;
    Metrics {
        accuracy: folds.iter().map(|m| m.accuracy).sum::<f64>() / n,
        precision: folds.iter().map(|m| m.precision).sum::<f64>() / n,
        recall: folds.iter().map(|m| m.recall).sum::<f64>() / n,
        f1: folds.iter().map(|m| m.f1).sum::<f64>() / n,
    }
}

/// Cross-validation output: per-fold metrics, their mean, and the fold
/// assignment that produced them (needed to pair reports for significance).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub lambda: f64,
    pub seed: u64,
    /// Feature groups the run was configured with; echoed for the report
    /// reader, not consumed here.
    pub groups: Vec<String>,
    pub fold_assignments: Vec<usize>,
    pub folds: Vec<Metrics>,
    pub mean: Metrics,
}

/// Stratified k-fold evaluation around caller-supplied fitting. `fit`
/// builds fold-local state (dictionaries, vocabularies) from training
/// indices only; `trans` turns one example index into its feature vector
/// under that state. Leakage is structurally impossible: the held-out fold
/// is never passed to `fit`.
pub fn cross_validate<T, E, Fit, Trans>(
    labels: &[Label],
    k: usize,
    lambda: f64,
    seed: u64,
    fit: Fit,
    trans: Trans,
) -> Result<CvReport, E>
where
    Fit: Fn(&[usize]) -> Result<T, E>,
    Trans: Fn(&T, usize) -> Result<FeatureVector, E>,
    E: From<ModelError>,
{
    let assignments = stratified_folds(labels, k, seed)?;
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let train_idx: Vec<usize> = (0..labels.len())
            .filter(|i| assignments[*i] != fold)
            .collect();
        let test_idx: Vec<usize> = (0..labels.len())
            .filter(|i| assignments[*i] == fold)
            .collect();
        let state = fit(&train_idx)?;
        let train_x: Vec<FeatureVector> = train_idx
            .iter()
            .map(|i| trans(&state, *i))
            .collect::<Result<_, E>>()?;
        let train_y: Vec<Label> = train_idx.iter().map(|i| labels[*i]).collect();
        let model = train(&train_x, &train_y, lambda, seed)?;
        let predictions: Vec<Label> = test_idx
            .iter()
            .map(|i| trans(&state, *i).map(|v| predict(&model, &v)))
            .collect::<Result<_, E>>()?;
        let truth: Vec<Label> = test_idx.iter().map(|i| labels[*i]).collect();
        folds.push(metrics(&truth, &predictions)?);
    }
    Ok(CvReport {
        k,
        lambda,
        seed,
        groups: Vec::new(),
        fold_assignments: assignments,
        mean: mean_metrics_of(&folds),
        folds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    Precision,
    Recall,
    F1,
}

impl MetricKind {
    pub fn of(self, m: &Metrics) -> f64 {
        match self {
            MetricKind::Accuracy => m.accuracy,
            MetricKind::Precision => m.precision,
            MetricKind::Recall => m.recall,
            MetricKind::F1 => m.f1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Precision => "precision",
            MetricKind::Recall => "recall",
            MetricKind::F1 => "f1",
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "accuracy" => Ok(MetricKind::Accuracy),
            "precision" => Ok(MetricKind::Precision),
            "recall" => Ok(MetricKind::Recall),
            "f1" => Ok(MetricKind::F1),
            other => Err(format!(
                "unknown metric {other:?} (expected accuracy, precision, recall, or f1)"
            )),
        }
    }
}

/// Paired two-sided t-test over per-fold metric differences (b minus a).
/// The t statistic is None in the two degenerate zero-variance branches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub metric: MetricKind,
    pub mean_difference: f64,
    pub t_statistic: Option<f64>,
    pub p_value: f64,
    pub significant: bool,
}

pub fn paired_significance(
    a: &CvReport,
    b: &CvReport,
    metric: MetricKind,
) -> Result<SignificanceResult, ModelError> {
    if a.fold_assignments != b.fold_assignments || a.folds.len() != b.folds.len() {
        return Err(ModelError::FoldMismatch);
    }
    if a.folds.is_empty() {
        return Err(ModelError::Empty);
    }
    let diffs: Vec<f64> = a
        .folds
        .iter()
        .zip(&b.folds)
        .map(|(fa, fb)| metric.of(fb) - metric.of(fa))
        .collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);

    let (t_statistic, p_value) = if var == 0.0 {
        // Degenerate rules: no spread at all. Identical folds prove
        // nothing (p = 1); a constant nonzero shift is unambiguous (p = 0).
        if mean == 0.0 {
            (None, 1.0)
        } else {
            (None, 0.0)
        }
    } else {
        let t = mean / (var.sqrt() / n.sqrt());
        let dist = StudentsT::new(0.0, 1.0, n - 1.0).expect("n >= 2 checked above");
        let p = 2.0 * (1.0 - dist.cdf(t.abs()));
        (Some(t), p.clamp(0.0, 1.0))
    };

    Ok(SignificanceResult {
        metric,
        mean_difference: mean,
        t_statistic,
        p_value,
        significant: p_value < ALPHA,
    })
}
