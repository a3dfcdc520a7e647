//! Shapley-value attribution of back-end scores to attribute values.
//!
//! Coalition semantics are interventional: features outside the coalition
//! are replaced by values from a background dataset, and a coalition's value
//! is the mean model score over those blends. Exact enumeration is available
//! up to 20 features; larger embeddings use permutation sampling. Per-report
//! rankings of absolute values aggregate into per-value and per-attribute
//! mean ranks.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::AttributeSchema;

/// Enumeration bound for the exact estimator.
pub const EXACT_FEATURE_LIMIT: usize = 20;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("{got} features exceed the exact enumeration bound of {limit}")]
    TooManyFeatures { got: usize, limit: usize },
    #[error("background dataset is empty")]
    EmptyBackground,
    #[error("no reports to aggregate")]
    EmptyReportSet,
    #[error("expected vectors of length {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

impl ExplainError {
    pub fn category(&self) -> &'static str {
        match self {
            ExplainError::TooManyFeatures { .. } => "TooManyFeatures",
            ExplainError::EmptyBackground => "EmptyBackground",
            ExplainError::EmptyReportSet => "EmptyReportSet",
            ExplainError::DimensionMismatch { .. } => "DimensionMismatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Exact,
    Permutation { n: usize },
}

/// Attribution of one score to the features of one input.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapleyReport {
    pub phi: Vec<f64>,
    /// Mean score over the background (the empty-coalition value).
    pub base: f64,
    /// Score at the explained input (the full-coalition value).
    pub prediction: f64,
    pub estimator: Estimator,
    /// Per-feature standard errors; sampled estimator only.
    pub std_err: Option<Vec<f64>>,
}

fn validate_background(x: &[f64], background: &[Vec<f64>]) -> Result<(), ExplainError> {
    if background.is_empty() {
        return Err(ExplainError::EmptyBackground);
    }
    for b in background {
        if b.len() != x.len() {
            return Err(ExplainError::DimensionMismatch {
                expected: x.len(),
                got: b.len(),
            });
        }
    }
    Ok(())
}

/// Mean of `f` over the background with coalition features taken from `x`.
fn coalition_value<F: Fn(&[f64]) -> f64>(
    f: &F,
    x: &[f64],
    background: &[Vec<f64>],
    mask: impl Fn(usize) -> bool,
) -> f64 {
    let mut total = 0.0;
    let mut blend = vec![0.0; x.len()];
    for b in background {
        for i in 0..x.len() {
            blend[i] = if mask(i) { x[i] } else { b[i] };
        }
        total += f(&blend);
    }
    total / background.len() as f64
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut num = 1.0f64;
    let mut den = 1.0f64;
    for i in 0..k {
        num *= (n - i) as f64;
        den *= (i + 1) as f64;
    }
    num / den
}

/// Exact Shapley values by full coalition enumeration. The weight of a
/// coalition of size s is `s!(T-s-1)!/T! = 1/(T * C(T-1, s))`.
pub fn shapley_exact<F: Fn(&[f64]) -> f64>(
    f: &F,
    x: &[f64],
    background: &[Vec<f64>],
) -> Result<ShapleyReport, ExplainError> {
    let t = x.len();
    if t > EXACT_FEATURE_LIMIT {
        return Err(ExplainError::TooManyFeatures {
            got: t,
            limit: EXACT_FEATURE_LIMIT,
        });
    }
    validate_background(x, background)?;

    // Coalition values for every subset, indexed by bitmask.
    let values: Vec<f64> = (0u32..(1u32 << t))
        .map(|mask| coalition_value(f, x, background, |i| mask & (1 << i) != 0))
        .collect();

    let weights: Vec<f64> = (0..t)
        .map(|s| 1.0 / (t as f64 * binomial(t - 1, s)))
        .collect();

    let mut phi = vec![0.0; t];
    for (j, phi_j) in phi.iter_mut().enumerate() {
        let bit = 1u32 << j;
        for mask in 0u32..(1u32 << t) {
            if mask & bit != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            *phi_j += weights[s] * (values[(mask | bit) as usize] - values[mask as usize]);
        }
    }

    Ok(ShapleyReport {
        phi,
        base: values[0],
        prediction: values[(1u32 << t) as usize - 1],
        estimator: Estimator::Exact,
        std_err: None,
    })
}

/// Permutation-sampling estimator: for each sampled feature order, marginal
/// contributions `v(S + j) - v(S)` accumulate along the order; the Shapley
/// value is their mean, reported with per-feature standard errors.
pub fn shapley_sample<F: Fn(&[f64]) -> f64>(
    f: &F,
    x: &[f64],
    background: &[Vec<f64>],
    n_permutations: usize,
    seed: u64,
) -> Result<ShapleyReport, ExplainError> {
    assert!(n_permutations >= 1, "need at least one permutation");
    validate_background(x, background)?;
    let t = x.len();
    let mut rng = crate::rng::derive_rng(seed, "shapley-perm", 0);

    let base = coalition_value(f, x, background, |_| false);
    let prediction = coalition_value(f, x, background, |_| true);

    // Welford accumulators per feature.
    let mut mean = vec![0.0; t];
    let mut m2 = vec![0.0; t];
    let mut order: Vec<usize> = (0..t).collect();
    let mut in_coalition = vec![false; t];

    for n in 1..=n_permutations {
        order.shuffle(&mut rng);
        in_coalition.iter_mut().for_each(|b| *b = false);
        let mut prev = base;
        for &j in &order {
            in_coalition[j] = true;
            let value = coalition_value(f, x, background, |i| in_coalition[i]);
            let marginal = value - prev;
            prev = value;
            let delta = marginal - mean[j];
            mean[j] += delta / n as f64;
            m2[j] += delta * (marginal - mean[j]);
        }
    }

    let std_err: Vec<f64> = m2
        .iter()
        .map(|&s| {
            if n_permutations > 1 {
                (s / ((n_permutations - 1) as f64 * n_permutations as f64)).sqrt()
            } else {
                f64::INFINITY
            }
        })
        .collect();

    Ok(ShapleyReport {
        phi: mean,
        base,
        prediction,
        estimator: Estimator::Permutation { n: n_permutations },
        std_err: Some(std_err),
    })
}

/// Descending ranks (1 = largest) with ties receiving the average of their
/// positions; the result is a permutation statistic of fixed sum.
pub fn ranks_descending(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut pos = 0;
    while pos < order.len() {
        let mut end = pos + 1;
        while end < order.len() && values[order[end]] == values[order[pos]] {
            end += 1;
        }
        // Average of 1-based positions pos+1 ..= end.
        let avg = (pos + 1 + end) as f64 / 2.0;
        for &i in &order[pos..end] {
            ranks[i] = avg;
        }
        pos = end;
    }
    ranks
}

/// Mean rank per attribute value and per attribute; lower means more
/// influential.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankingTable {
    /// Mean rank of each of the M attribute values.
    pub value_ranks: Vec<f64>,
    /// Mean of each attribute's value ranks.
    pub attribute_ranks: Vec<f64>,
    pub reports: usize,
}

/// Ranks every report's absolute values (1 = most influential), averages the
/// ranks over reports, and averages each attribute's value ranks into an
/// attribute rank.
pub fn rank_aggregate(
    reports: &[Vec<f64>],
    schema: &AttributeSchema,
) -> Result<RankingTable, ExplainError> {
    if reports.is_empty() {
        return Err(ExplainError::EmptyReportSet);
    }
    let m = schema.total_values();
    let mut sums = vec![0.0; m];
    for report in reports {
        if report.len() != m {
            return Err(ExplainError::DimensionMismatch {
                expected: m,
                got: report.len(),
            });
        }
        let magnitudes: Vec<f64> = report.iter().map(|v| v.abs()).collect();
        for (s, r) in sums.iter_mut().zip(ranks_descending(&magnitudes)) {
            *s += r;
        }
    }
    let value_ranks: Vec<f64> = sums.into_iter().map(|s| s / reports.len() as f64).collect();
    let attribute_ranks = (0..schema.num_attributes())
        .map(|l| {
            let range = schema.block_range(l);
            let width = range.len() as f64;
            value_ranks[range].iter().sum::<f64>() / width
        })
        .collect();
    Ok(RankingTable {
        value_ranks,
        attribute_ranks,
        reports: reports.len(),
    })
}
