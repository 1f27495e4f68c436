//! Evaluation: ROC/AUC, relative bias, CI coverage and communication summaries.

use std::collections::BTreeMap;

use crate::error::{FedError, Result};
use crate::model::Coefficients;
use crate::protocols::FitResult;

fn class_counts(scores: &[f64], labels: &[f64]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(FedError::DimensionMismatch {
            expected: labels.len(),
            found: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(FedError::InvalidData("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(FedError::UndefinedAuc);
    }
    Ok((pos, neg))
}

/// Mann–Whitney AUC: `(#{pos > neg} + ½·#{ties}) / (#pos·#neg)`, computed
/// from mid-ranks in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the rank sum keeps mid-ranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share the mid-rank (i + j + 2) / 2
        let twice_mid = (i + j + 2) as u128;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count() as u128;
        twice_rank_sum += twice_mid * tied_pos;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    // 2U = 2R − p(p+1)
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// ROC points from a threshold sweep over distinct scores, descending.
/// Starts at (0, 0) and ends at (1, 1).
pub fn roc_curve(scores: &[f64], labels: &[f64]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

/// Trapezoidal area under a piecewise-linear curve.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

/// `(β̂ⱼ − βⱼ)/βⱼ` for the informative slopes `1..=s`, where `s = truth.len()`.
pub fn relative_bias(estimate: &Coefficients, truth: &[f64]) -> Result<Vec<f64>> {
    if truth.len() > estimate.slopes().len() {
        return Err(FedError::DimensionMismatch {
            expected: estimate.slopes().len(),
            found: truth.len(),
        });
    }
    if let Some(j) = truth.iter().position(|&b| b == 0.0) {
        return Err(FedError::InvalidData(format!(
            "true effect {} is zero; relative bias is undefined",
            j + 1
        )));
    }
    Ok(estimate
        .slopes()
        .iter()
        .zip(truth)
        .map(|(e, t)| (e - t) / t)
        .collect())
}

/// `|β̂ⱼ|` for the zero-effect slopes `s+1..=p`.
pub fn zero_effect_abs_error(estimate: &Coefficients, s: usize) -> Vec<f64> {
    estimate.slopes().iter().skip(s).map(|v| v.abs()).collect()
}

/// Share of runs whose interval contains the truth, per coefficient.
/// Each run supplies one interval per entry of `truth`.
pub fn coverage(ci_runs: &[Vec<(f64, f64)>], truth: &[f64]) -> Result<Vec<f64>> {
    if ci_runs.is_empty() {
        return Err(FedError::InvalidData("coverage needs at least one run".into()));
    }
    if let Some(run) = ci_runs.iter().find(|r| r.len() != truth.len()) {
        return Err(FedError::DimensionMismatch {
            expected: truth.len(),
            found: run.len(),
        });
    }
    let runs = ci_runs.len() as f64;
    Ok(truth
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            ci_runs
                .iter()
                .filter(|r| r[j].0 <= t && t <= r[j].1)
                .count() as f64
                / runs
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundsSummary {
    pub runs: usize,
    pub mean: f64,
    pub min: usize,
    pub max: usize,
    pub converged: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BytesSummary {
    pub up: u64,
    pub down: u64,
}

pub fn summarize_rounds<'a>(fits: impl IntoIterator<Item = &'a FitResult>) -> Option<RoundsSummary> {
    let fits: Vec<&FitResult> = fits.into_iter().collect();
    if fits.is_empty() {
        return None;
    }
    let rounds: Vec<usize> = fits.iter().map(|f| f.rounds_used).collect();
    Some(RoundsSummary {
        runs: fits.len(),
        mean: rounds.iter().sum::<usize>() as f64 / fits.len() as f64,
        min: *rounds.iter().min().expect("non-empty"),
        max: *rounds.iter().max().expect("non-empty"),
        converged: fits.iter().filter(|f| f.converged).count(),
    })
}

pub fn summarize_bytes<'a>(fits: impl IntoIterator<Item = &'a FitResult>) -> BytesSummary {
    fits.into_iter().fold(BytesSummary { up: 0, down: 0 }, |acc, f| BytesSummary {
        up: acc.up + f.bytes_up,
        down: acc.down + f.bytes_down,
    })
}

/// Everything one protocol's batch produced, keyed for tabulation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    /// Test-site index → AUC.
    pub auc_per_testset: BTreeMap<usize, f64>,
    pub roc_points: BTreeMap<usize, Vec<(f64, f64)>>,
    /// Runs × informative coefficients.
    pub relative_bias: Vec<Vec<f64>>,
    pub coverage: Vec<f64>,
    pub rounds_summary: BTreeMap<String, RoundsSummary>,
    pub bytes_summary: BTreeMap<String, BytesSummary>,
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
