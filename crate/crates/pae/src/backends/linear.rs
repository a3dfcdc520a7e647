//! One-vs-rest linear classifiers: regularized logistic regression trained
//! by gradient descent with backtracking line search, and a linear SVM
//! trained by primal subgradient descent with averaged iterates.

use serde::{Deserialize, Serialize};

use super::{BackendError, Classifier};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Logistic,
    Hinge,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearOvRModel {
    pub objective: Objective,
    pub reg: f64,
    /// One weight vector per class.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub seed: u64,
    pub diagnostics: Vec<FitDiagnostics>,
}

/// Per-class fit summary; non-convergence is reported here, not as an error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub final_grad_norm: f64,
}

const GRAD_TOL: f64 = 1e-6;
const MAX_ITERS: usize = 1000;
const HINGE_ITERS: usize = 2000;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// log(1 + exp(-m)) without overflow.
fn softplus_neg(m: f64) -> f64 {
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

fn logistic_loss(rows: &[Vec<f64>], ys: &[f64], w: &[f64], b: f64, reg: f64) -> f64 {
    let data: f64 = rows
        .iter()
        .zip(ys)
        .map(|(x, &y)| softplus_neg(y * (dot(w, x) + b)))
        .sum::<f64>()
        / rows.len() as f64;
    data + 0.5 * reg * dot(w, w)
}

fn logistic_grad(rows: &[Vec<f64>], ys: &[f64], w: &[f64], b: f64, reg: f64) -> (Vec<f64>, f64) {
    let n = rows.len() as f64;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for (x, &y) in rows.iter().zip(ys) {
        let m = dot(w, x) + b;
        // d/dm log(1+exp(-y m)) = -y * sigmoid(-y m)
        let s = 1.0 / (1.0 + (y * m).exp());
        let coeff = -y * s / n;
        for (g, &xi) in gw.iter_mut().zip(x) {
            *g += coeff * xi;
        }
        gb += coeff;
    }
    for (g, &wi) in gw.iter_mut().zip(w) {
        *g += reg * wi;
    }
    (gw, gb)
}

/// Binary logistic fit; the loss is non-increasing across iterations thanks
/// to the Armijo backtracking rule.
fn fit_logistic_binary(
    rows: &[Vec<f64>],
    ys: &[f64],
    dim: usize,
    reg: f64,
) -> (Vec<f64>, f64, FitDiagnostics, Vec<f64>) {
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut loss = logistic_loss(rows, ys, &w, b, reg);
    let mut trajectory = vec![loss];
    let mut step = 1.0;
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;

    for iter in 0..MAX_ITERS {
        iterations = iter + 1;
        let (gw, gb) = logistic_grad(rows, ys, &w, b, reg);
        grad_norm = (dot(&gw, &gw) + gb * gb).sqrt();
        if grad_norm <= GRAD_TOL {
            iterations = iter;
            break;
        }
        // Armijo backtracking: loss(p - s g) <= loss - c s |g|^2.
        let sq = grad_norm * grad_norm;
        step *= 2.0;
        let mut accepted = false;
        for _ in 0..60 {
            let w_new: Vec<f64> = w.iter().zip(&gw).map(|(wi, gi)| wi - step * gi).collect();
            let b_new = b - step * gb;
            let loss_new = logistic_loss(rows, ys, &w_new, b_new, reg);
            if loss_new <= loss - 1e-4 * step * sq {
                w = w_new;
                b = b_new;
                loss = loss_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break; // step vanished; treat as converged to precision
        }
        trajectory.push(loss);
    }
    (
        w,
        b,
        FitDiagnostics {
            converged: grad_norm <= GRAD_TOL,
            iterations,
            final_grad_norm: grad_norm,
        },
        trajectory,
    )
}

/// Primal subgradient descent on the regularized hinge objective with step
/// `1/(reg * t)`, norm projection, and tail averaging of the iterates.
fn fit_hinge_binary(
    rows: &[Vec<f64>],
    ys: &[f64],
    dim: usize,
    reg: f64,
) -> (Vec<f64>, f64, FitDiagnostics, Vec<f64>) {
    let n = rows.len() as f64;
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let radius = 1.0 / reg.sqrt();
    let mut avg_w = vec![0.0; dim];
    let mut avg_b = 0.0;
    let mut averaged = 0usize;
    let tail_start = HINGE_ITERS / 2;
    let mut grad_norm = f64::INFINITY;

    for t in 1..=HINGE_ITERS {
        let mut gw: Vec<f64> = w.iter().map(|&wi| reg * wi).collect();
        let mut gb = 0.0;
        for (x, &y) in rows.iter().zip(ys) {
            if y * (dot(&w, x) + b) < 1.0 {
                for (g, &xi) in gw.iter_mut().zip(x) {
                    *g -= y * xi / n;
                }
                gb -= y / n;
            }
        }
        grad_norm = (dot(&gw, &gw) + gb * gb).sqrt();
        let eta = 1.0 / (reg * t as f64);
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= eta * gi;
        }
        b -= eta * gb;
        let norm = dot(&w, &w).sqrt();
        if norm > radius {
            let scale = radius / norm;
            w.iter_mut().for_each(|wi| *wi *= scale);
        }
        if t > tail_start {
            for (a, &wi) in avg_w.iter_mut().zip(&w) {
                *a += wi;
            }
            avg_b += b;
            averaged += 1;
        }
    }
    let scale = 1.0 / averaged as f64;
    avg_w.iter_mut().for_each(|a| *a *= scale);
    avg_b *= scale;
    (
        avg_w,
        avg_b,
        FitDiagnostics {
            converged: true,
            iterations: HINGE_ITERS,
            final_grad_norm: grad_norm,
        },
        Vec::new(),
    )
}

/// Fits one binary classifier per class (that class positive, the rest
/// negative). Also returns the per-class logistic loss trajectories for
/// diagnostics; they are empty for the hinge objective.
pub fn ovr_fit(
    rows: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    objective: Objective,
    reg: f64,
    seed: u64,
) -> Result<(LinearOvRModel, Vec<Vec<f64>>), BackendError> {
    use rayon::prelude::*;

    if rows.is_empty() {
        return Err(BackendError::EmptyData);
    }
    if rows.len() != labels.len() {
        return Err(BackendError::LengthMismatch(rows.len(), labels.len()));
    }
    if n_classes < 2 {
        return Err(BackendError::SingleClass);
    }
    let dim = rows[0].len();
    for row in rows {
        if row.len() != dim {
            return Err(BackendError::DimensionMismatch {
                expected: dim,
                got: row.len(),
            });
        }
    }
    for &label in labels {
        if label >= n_classes {
            return Err(BackendError::ClassOutOfRange {
                got: label,
                classes: n_classes,
            });
        }
    }

    let per_class: Vec<(Vec<f64>, f64, FitDiagnostics, Vec<f64>)> = (0..n_classes)
        .into_par_iter()
        .map(|c| {
            let ys: Vec<f64> = labels
                .iter()
                .map(|&l| if l == c { 1.0 } else { -1.0 })
                .collect();
            match objective {
                Objective::Logistic => fit_logistic_binary(rows, &ys, dim, reg),
                Objective::Hinge => fit_hinge_binary(rows, &ys, dim, reg),
            }
        })
        .collect();

    let mut weights = Vec::with_capacity(n_classes);
    let mut biases = Vec::with_capacity(n_classes);
    let mut diagnostics = Vec::with_capacity(n_classes);
    let mut trajectories = Vec::with_capacity(n_classes);
    for (w, b, diag, traj) in per_class {
        weights.push(w);
        biases.push(b);
        diagnostics.push(diag);
        trajectories.push(traj);
    }
    Ok((
        LinearOvRModel {
            objective,
            reg,
            weights,
            biases,
            seed,
            diagnostics,
        },
        trajectories,
    ))
}

impl Classifier for LinearOvRModel {
    fn num_classes(&self) -> usize {
        self.weights.len()
    }

    fn feature_dim(&self) -> usize {
        self.weights.first().map_or(0, |w| w.len())
    }

    /// Per-class margins `w_c . x + b_c`.
    fn scores(&self, x: &[f64]) -> Result<Vec<f64>, BackendError> {
        if x.len() != self.feature_dim() {
            return Err(BackendError::DimensionMismatch {
                expected: self.feature_dim(),
                got: x.len(),
            });
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, &b)| dot(w, x) + b)
            .collect())
    }
}
