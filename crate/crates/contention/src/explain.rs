//! Explanation artifacts: odds-ratio reports from trained models, early
//! prediction curves over comment prefixes, and the Kolmogorov-Smirnov
//! two-sample check used to compare subreddit distributions across labels.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::featurize::FeatureVector;
use crate::model::{
    mean_metrics_of, metrics, predict, stratified_folds, train, Metrics, ModelError, TrainedModel,
};

#[derive(Debug, thiserror::Error)]
pub enum ExplainError {
    #[error("both samples must be non-empty")]
    EmptySample,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One model coefficient restated as an odds ratio. Ratios are on the
/// standardized feature scale: one standard deviation of the input, not one
/// raw unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureOdds {
    pub feature: String,
    pub group: String,
    pub coefficient: f64,
    pub odds_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OddsRatioReport {
    /// Every feature in model order (sorted names), intercept excluded.
    pub features: Vec<FeatureOdds>,
    pub top: Vec<FeatureOdds>,
    pub bottom: Vec<FeatureOdds>,
    pub k: usize,
    /// True when the model has fewer than 2k features, in which case top
    /// and bottom each list everything.
    pub truncated: bool,
}

/// Ranking lists recomputed for an arbitrary k.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopBottom {
    pub top: Vec<FeatureOdds>,
    pub bottom: Vec<FeatureOdds>,
    pub truncated: bool,
}

pub const DEFAULT_TOP_K: usize = 10;

fn feature_odds(model: &TrainedModel) -> Vec<FeatureOdds> {
    model
        .feature_names
        .iter()
        .zip(&model.coefficients)
        .map(|(name, beta)| {
            let group = name.split_once('/').map(|(g, _)| g).unwrap_or("");
            FeatureOdds {
                feature: name.clone(),
                group: group.to_string(),
                coefficient: *beta,
                odds_ratio: beta.exp(),
            }
        })
        .collect()
}

pub fn odds_ratios(model: &TrainedModel) -> OddsRatioReport {
    let features = feature_odds(model);
    let provisional = OddsRatioReport {
        features,
        top: Vec::new(),
        bottom: Vec::new(),
        k: DEFAULT_TOP_K,
        truncated: false,
    };
    let ranks = top_bottom(&provisional, DEFAULT_TOP_K);
    OddsRatioReport {
        top: ranks.top,
        bottom: ranks.bottom,
        truncated: ranks.truncated,
        ..provisional
    }
}

/// Top k by odds ratio descending and bottom k ascending, with feature name
/// as the deterministic tie-break. Fewer than 2k features returns everything
/// in both lists, flagged.
pub fn top_bottom(report: &OddsRatioReport, k: usize) -> TopBottom {
    let truncated = report.features.len() < 2 * k;
    let take = if truncated { report.features.len() } else { k };

    let mut descending = report.features.clone();
    descending.sort_by(|a, b| {
        b.odds_ratio
            .total_cmp(&a.odds_ratio)
            .then_with(|| a.feature.cmp(&b.feature))
    });
    let mut ascending = report.features.clone();
    ascending.sort_by(|a, b| {
        a.odds_ratio
            .total_cmp(&b.odds_ratio)
            .then_with(|| a.feature.cmp(&b.feature))
    });

    TopBottom {
        top: descending.into_iter().take(take).collect(),
        bottom: ascending.into_iter().take(take).collect(),
        truncated,
    }
}

/// CSV view: `feature,group,coefficient,odds_ratio`.
pub fn write_odds_csv<W: Write>(mut out: W, report: &OddsRatioReport) -> std::io::Result<()> {
    writeln!(out, "feature,group,coefficient,odds_ratio")?;
    for f in &report.features {
        let quote = |s: &str| {
            if s.contains(',') || s.contains('"') {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s.to_string()
            }
        };
        writeln!(
            out,
            "{},{},{},{}",
            quote(&f.feature),
            quote(&f.group),
            f.coefficient,
            f.odds_ratio
        )?;
    }
    Ok(())
}

/// The ten evaluation fractions, first tenth through the whole conversation.
pub const EARLY_FRACTIONS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub accuracy: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EarlyCurve {
    pub points: Vec<CurvePoint>,
    pub k: usize,
    pub lambda: f64,
    pub seed: u64,
}

/// Early-prediction protocol: models are trained once per fold on full
/// conversations, then evaluated against test conversations truncated to
/// each fraction. `trans` receives (fold state, example index, fraction).
/// With the same seed and closures, the fraction-1.0 point reproduces
/// [`crate::model::cross_validate`] bit-exactly.
pub fn early_curve<T, E, Fit, Trans>(
    labels: &[Label],
    k: usize,
    lambda: f64,
    seed: u64,
    fractions: &[f64],
    fit: Fit,
    trans: Trans,
) -> Result<EarlyCurve, E>
where
    Fit: Fn(&[usize]) -> Result<T, E>,
    Trans: Fn(&T, usize, f64) -> Result<FeatureVector, E>,
    E: From<ModelError>,
{
    let assignments = stratified_folds(labels, k, seed)?;
    let mut per_fraction: Vec<Vec<Metrics>> = vec![Vec::with_capacity(k); fractions.len()];
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
            .map(|i| trans(&state, *i, 1.0))
            .collect::<Result<_, E>>()?;
        let train_y: Vec<Label> = train_idx.iter().map(|i| labels[*i]).collect();
        let model = train(&train_x, &train_y, lambda, seed)?;
        let truth: Vec<Label> = test_idx.iter().map(|i| labels[*i]).collect();
        for (f_idx, fraction) in fractions.iter().enumerate() {
            let predictions: Vec<Label> = test_idx
                .iter()
                .map(|i| trans(&state, *i, *fraction).map(|v| predict(&model, &v)))
                .collect::<Result<_, E>>()?;
            per_fraction[f_idx].push(metrics(&truth, &predictions)?);
        }
    }
    let points = fractions
        .iter()
        .zip(&per_fraction)
        .map(|(fraction, folds)| {
            let mean = mean_metrics_of(folds);
            CurvePoint {
                fraction: *fraction,
                accuracy: mean.accuracy,
                f1: mean.f1,
            }
        })
        .collect();
    Ok(EarlyCurve {
        points,
        k,
        lambda,
        seed,
    })
}

/// CSV view: `fraction,accuracy,f1`.
pub fn write_curve_csv<W: Write>(mut out: W, curve: &EarlyCurve) -> std::io::Result<()> {
    writeln!(out, "fraction,accuracy,f1")?;
    for p in &curve.points {
        writeln!(out, "{},{},{}", p.fraction, p.accuracy, p.f1)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub d: f64,
    pub p_value: f64,
    pub n_a: usize,
    pub n_b: usize,
}

/// Two-sample Kolmogorov-Smirnov test. D is the exact supremum of the
/// empirical CDF gap over the merged sample points; p uses the asymptotic
/// Kolmogorov series with the standard small-sample correction, clamped to
/// [0, 1].
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult, ExplainError> {
    if a.is_empty() || b.is_empty() {
        return Err(ExplainError::EmptySample);
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);

    let cdf = |sorted: &[f64], x: f64| -> f64 {
        // Proportion of the sample <= x.
        let count = sorted.partition_point(|v| *v <= x);
        count as f64 / sorted.len() as f64
    };
    let mut d: f64 = 0.0;
    for x in sa.iter().chain(sb.iter()) {
        d = d.max((cdf(&sa, *x) - cdf(&sb, *x)).abs());
    }

    let ne = (sa.len() * sb.len()) as f64 / (sa.len() + sb.len()) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    let p_value = kolmogorov_tail(lambda);

    Ok(KsResult {
        d,
        p_value,
        n_a: sa.len(),
        n_b: sb.len(),
    })
}

/// Q(lambda) = 2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 lambda^2). The series
/// diverges pointwise at lambda = 0 where the true limit is 1, so tiny
/// lambda short-circuits.
fn kolmogorov_tail(lambda: f64) -> f64 {
    if lambda < 1e-8 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=1000 {
        let term = (-2.0 * (j as f64).powi(2) * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
