//! Scores: regression metrics for continuous age, accuracy and Cohen's kappa
//! for categorical attributes, and off-target rates.
//!
//! Undefined values (R² with constant truth, kappa with no chance-corrected
//! denominator, rates over an empty set) are `None`, never NaN.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Prediction, Resolution};
use crate::taxonomy::MAX_AGE_YEARS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("predictions ({pred}) and truths ({truth}) differ in length")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("truth value {0} is outside [0, {MAX_AGE_YEARS}]")]
    TruthOutOfRange(f64),
    #[error("class index {index} is not below K = {k}")]
    IndexOutOfRange { index: usize, k: usize },
}

/// How MAPE treats zero ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MapeZeroPolicy {
    /// Drop samples whose truth is 0 from the MAPE mean.
    #[default]
    Exclude,
    /// Use `max(t, epsilon)` as the denominator.
    Epsilon(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionScores {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    /// `None` when every truth is identical.
    pub r2: Option<f64>,
    /// `None` when every sample was excluded from MAPE.
    pub mape_percent: Option<f64>,
    /// Samples contributing to MAPE.
    pub n_used: usize,
    /// Samples dropped from MAPE by the zero-truth policy.
    pub n_excluded: usize,
}

pub fn regression_scores(pred: &[f64], truth: &[f64], zero_policy: MapeZeroPolicy) -> Result<RegressionScores, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.len() < 2 {
        return Err(MetricsError::TooFewSamples { needed: 2, got: pred.len() });
    }
    if let Some(&bad) = truth.iter().find(|&&t| !(0.0..=f64::from(MAX_AGE_YEARS)).contains(&t)) {
        return Err(MetricsError::TruthOutOfRange(bad));
    }

    let n = pred.len() as f64;
    let mut sq = 0.0;
    let mut abs = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        let e = p - t;
        sq += e * e;
        abs += e.abs();
    }
    let mse = sq / n;
    let mae = abs / n;

    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - sq / ss_tot);

    let mut ape = 0.0;
    let mut n_used = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        let denom = match zero_policy {
            MapeZeroPolicy::Exclude if *t == 0.0 => continue,
            MapeZeroPolicy::Exclude => *t,
            MapeZeroPolicy::Epsilon(eps) => t.max(eps),
        };
        ape += (p - t).abs() / denom;
        n_used += 1;
    }
    let mape_percent = (n_used > 0).then(|| ape / n_used as f64 * 100.0);

    Ok(RegressionScores {
        mse,
        rmse: mse.sqrt(),
        mae,
        r2,
        mape_percent,
        n_used,
        n_excluded: pred.len() - n_used,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationScores {
    pub accuracy: f64,
    /// Unweighted Cohen's kappa; `None` when chance agreement is 1 but observed
    /// agreement is not.
    pub kappa: Option<f64>,
    /// `confusion[truth][pred]` counts.
    pub confusion: Vec<Vec<u64>>,
}

pub fn classification_scores(pred: &[usize], truth: &[usize], k: usize) -> Result<ClassificationScores, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricsError::TooFewSamples { needed: 1, got: 0 });
    }
    let mut confusion = vec![vec![0u64; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        for index in [p, t] {
            if index >= k {
                return Err(MetricsError::IndexOutOfRange { index, k });
            }
        }
        confusion[t][p] += 1;
    }

    let n = pred.len() as f64;
    let diag: u64 = (0..k).map(|i| confusion[i][i]).sum();
    let p_o = diag as f64 / n;
    let p_e: f64 = (0..k)
        .map(|i| {
            let row: u64 = confusion[i].iter().sum();
            let col: u64 = confusion.iter().map(|r| r[i]).sum();
            (row as f64 / n) * (col as f64 / n)
        })
        .sum();
    let kappa = if p_e == 1.0 {
        (p_o == 1.0).then_some(1.0)
    } else {
        Some((p_o - p_e) / (1.0 - p_e))
    };

    Ok(ClassificationScores {
        accuracy: p_o,
        kappa,
        confusion,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResolutionCounts {
    pub parsed_first: usize,
    pub parsed_retry: usize,
    pub embedding_fallback: usize,
    pub imputed: usize,
    pub unresolvable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffTargetScores {
    /// Share of predictions whose first reply was off-target.
    pub first_attempt_rate: Option<f64>,
    /// Share still off-target after all retries (fallback or imputation).
    pub post_retry_rate: Option<f64>,
    /// Predictions counted in both rates; unresolvable ones are left out.
    pub total: usize,
    pub counts: ResolutionCounts,
}

pub fn off_target_scores(predictions: &[Prediction]) -> OffTargetScores {
    let mut counts = ResolutionCounts::default();
    let mut first = 0usize;
    let mut post = 0usize;
    for p in predictions {
        match p.resolution {
            Resolution::Parsed { attempt: 1 } => counts.parsed_first += 1,
            Resolution::Parsed { .. } => counts.parsed_retry += 1,
            Resolution::EmbeddingFallback => counts.embedding_fallback += 1,
            Resolution::Imputed => counts.imputed += 1,
            Resolution::Unresolvable { .. } => {
                counts.unresolvable += 1;
                continue;
            }
        }
        if p.first_attempt_off_target {
            first += 1;
        }
        if p.resolution.is_post_retry_off_target() {
            post += 1;
        }
    }
    let total = predictions.len() - counts.unresolvable;
    let rate = |x: usize| (total > 0).then(|| x as f64 / total as f64);
    OffTargetScores {
        first_attempt_rate: rate(first),
        post_retry_rate: rate(post),
        total,
        counts,
    }
}
