//! Categorical naive Bayes over probabilistic attribute embeddings.
//!
//! Each class is a set of L categorical distributions, one per attribute.
//! Fitting accumulates soft counts `S[l][m] = sum_n rho[l][m]` over the
//! class's utterances and normalizes per attribute, optionally smoothed:
//! `theta = (S + alpha) / (sum S + alpha * M_l)`. With `alpha = 0` and
//! one-hot rows this is exactly relative-frequency counting. Scoring adds
//! `log prior + sum rho * log theta` per class; a zero-probability table
//! entry met with positive feature mass yields a `-inf` sentinel
//! (`0 * log 0` is taken as 0).

use serde::{Deserialize, Serialize};

use super::{BackendError, Classifier};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoricalModel {
    /// Per-class prior; uniform by default.
    pub priors: Vec<f64>,
    /// theta[class][attribute][value].
    pub theta: Vec<Vec<Vec<f64>>>,
    /// Per-attribute value counts (block widths).
    pub widths: Vec<usize>,
    pub alpha: f64,
}

impl CategoricalModel {
    pub fn feature_len(&self) -> usize {
        self.widths.iter().sum()
    }
}

/// Maximum-likelihood (or smoothed) estimate of the per-class categorical
/// tables from soft attribute distributions.
pub fn nb_fit(
    rows: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    widths: &[usize],
    alpha: f64,
) -> Result<CategoricalModel, BackendError> {
    assert!(alpha >= 0.0, "smoothing must be non-negative");
    if rows.is_empty() {
        return Err(BackendError::EmptyData);
    }
    if rows.len() != labels.len() {
        return Err(BackendError::LengthMismatch(rows.len(), labels.len()));
    }
    let total: usize = widths.iter().sum();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != total {
            return Err(BackendError::DimensionMismatch {
                expected: total,
                got: row.len(),
            });
        }
        if row.iter().any(|&v| v < 0.0) {
            return Err(BackendError::NegativeFeature { row: i });
        }
    }

    // Soft counts per class, attribute, value.
    let mut counts: Vec<Vec<Vec<f64>>> = (0..n_classes)
        .map(|_| widths.iter().map(|&w| vec![0.0; w]).collect())
        .collect();
    let mut class_sizes = vec![0usize; n_classes];
    for (row, &label) in rows.iter().zip(labels) {
        if label >= n_classes {
            return Err(BackendError::ClassOutOfRange {
                got: label,
                classes: n_classes,
            });
        }
        class_sizes[label] += 1;
        let mut offset = 0;
        for (l, &w) in widths.iter().enumerate() {
            for m in 0..w {
                counts[label][l][m] += row[offset + m];
            }
            offset += w;
        }
    }
    if let Some(empty) = class_sizes.iter().position(|&n| n == 0) {
        return Err(BackendError::EmptyClass(empty));
    }

    let theta = counts
        .into_iter()
        .map(|class_counts| {
            class_counts
                .into_iter()
                .map(|s| {
                    let m = s.len() as f64;
                    let denom: f64 = s.iter().sum::<f64>() + alpha * m;
                    s.into_iter()
                        .map(|v| if denom > 0.0 { (v + alpha) / denom } else { 1.0 / m })
                        .collect()
                })
                .collect()
        })
        .collect();

    Ok(CategoricalModel {
        priors: vec![1.0 / n_classes as f64; n_classes],
        theta,
        widths: widths.to_vec(),
        alpha,
    })
}

impl CategoricalModel {
    fn log_score(&self, class: usize, x: &[f64], clamp: bool) -> f64 {
        let mut score = self.priors[class].ln();
        let mut offset = 0;
        for (l, &w) in self.widths.iter().enumerate() {
            for m in 0..w {
                let rho = x[offset + m];
                if rho == 0.0 {
                    continue; // 0 * log 0 := 0
                }
                let theta = self.theta[class][l][m];
                if theta <= 0.0 {
                    if clamp {
                        score += rho * 1e-12f64.ln();
                    } else {
                        return f64::NEG_INFINITY;
                    }
                } else {
                    score += rho * theta.ln();
                }
            }
            offset += w;
        }
        score
    }
}

impl Classifier for CategoricalModel {
    fn num_classes(&self) -> usize {
        self.theta.len()
    }

    fn feature_dim(&self) -> usize {
        self.feature_len()
    }

    fn scores(&self, x: &[f64]) -> Result<Vec<f64>, BackendError> {
        if x.len() != self.feature_len() {
            return Err(BackendError::DimensionMismatch {
                expected: self.feature_len(),
                got: x.len(),
            });
        }
        Ok((0..self.num_classes())
            .map(|c| self.log_score(c, x, false))
            .collect())
    }

    /// Log score with the table entries clamped at 1e-12 so coalition blends
    /// used by feature-attribution stay finite.
    fn explanation_score(&self, class: usize, x: &[f64]) -> Result<f64, BackendError> {
        if x.len() != self.feature_len() {
            return Err(BackendError::DimensionMismatch {
                expected: self.feature_len(),
                got: x.len(),
            });
        }
        Ok(self.log_score(class, x, true))
    }
}
