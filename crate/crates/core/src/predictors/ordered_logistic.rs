//! Proportional-odds ordered logistic regression fit by maximum
//! likelihood.
//!
//! The model is Pr(Y ≤ c | x) = σ(θ_c − βᵀx) with strictly increasing
//! cutpoints θ_1 < … < θ_{K−1} shared across covariates. Fitting
//! minimizes the mean negative log-likelihood with BFGS plus Armijo
//! backtracking. Cutpoints are reparameterized as (θ_1, log-gaps) so
//! monotonicity holds by construction without projection, and
//! covariates are standardized internally with coefficients reported
//! back on the original scale.

use serde::{Deserialize, Serialize};

use crate::data::{ProbabilityMatrix, SurveyDataset};
use crate::error::{AuditError, Result};

/// Per-covariate training mean and standard deviation used internally.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub sd: f64,
}

/// Optimizer trace recorded on the fitted model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitMeta {
    pub iterations: usize,
    /// Mean negative log-likelihood at the returned parameters.
    pub final_nll: f64,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Optimizer settings for [`fit_ordered_logistic`].
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Which covariate positions feed the model; None uses all
    /// available, an empty list fits an intercept-only model.
    pub covariate_indices: Option<Vec<usize>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-6,
            covariate_indices: None,
        }
    }
}

/// Fitted proportional-odds model, parameters on the original
/// covariate scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderedLogisticModel {
    pub n_classes: usize,
    /// Strictly increasing cutpoints θ_1 < … < θ_{K−1}.
    pub cutpoints: Vec<f64>,
    /// One coefficient per entry of `covariate_indices`.
    pub coefficients: Vec<f64>,
    pub covariate_indices: Vec<usize>,
    pub standardization: Vec<Standardization>,
    pub fit_meta: FitMeta,
}

/// Parameter norm beyond which fitting aborts with a separation error.
const SEPARATION_NORM: f64 = 1e4;

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Cutpoints from the unconstrained parameterization
/// [θ_1, log-gap_2, …, log-gap_{K−1}].
fn cutpoints_from(params: &[f64], k: usize) -> Vec<f64> {
    let mut theta = Vec::with_capacity(k - 1);
    theta.push(params[0]);
    for j in 1..k - 1 {
        let prev = theta[j - 1];
        theta.push(prev + params[j].exp());
    }
    theta
}

/// Mean negative log-likelihood and its gradient in the unconstrained
/// parameterization. `rows` holds (outcome, standardized covariates).
fn nll_grad(params: &[f64], rows: &[(usize, Vec<f64>)], k: usize, p: usize) -> (f64, Vec<f64>) {
    let theta = cutpoints_from(params, k);
    let beta = &params[k - 1..];
    let n = rows.len() as f64;
    let mut nll = 0.0;
    let mut g_theta = vec![0.0; k - 1];
    let mut g_beta = vec![0.0; p];
    for (y, x) in rows {
        let eta: f64 = beta.iter().zip(x).map(|(b, v)| b * v).sum();
        let (a, da) = if *y < k {
            let s = sigmoid(theta[*y - 1] - eta);
            (s, s * (1.0 - s))
        } else {
            (1.0, 0.0)
        };
        let (b, db) = if *y > 1 {
            let s = sigmoid(theta[*y - 2] - eta);
            (s, s * (1.0 - s))
        } else {
            (0.0, 0.0)
        };
        let prob = (a - b).max(1e-300);
        nll -= prob.ln();
        if *y < k {
            g_theta[*y - 1] -= da / prob;
        }
        if *y > 1 {
            g_theta[*y - 2] += db / prob;
        }
        let g_eta = (da - db) / prob;
        for (gb, v) in g_beta.iter_mut().zip(x) {
            *gb += g_eta * v;
        }
    }
    // Chain rule into (θ_1, log-gaps): θ_1 moves every cutpoint; each
    // log-gap moves its own cutpoint and all later ones.
    let mut grad = vec![0.0; params.len()];
    let mut suffix = 0.0;
    for j in (0..k - 1).rev() {
        suffix += g_theta[j];
        if j == 0 {
            grad[0] = suffix / n;
        } else {
            grad[j] = params[j].exp() * suffix / n;
        }
    }
    for j in 0..p {
        grad[k - 1 + j] = g_beta[j] / n;
    }
    (nll / n, grad)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fit by BFGS with Armijo backtracking. Non-convergence is a flag on
/// the returned model; unbounded parameter growth (norm > 1e4),
/// symptomatic of perfect separation, is an error.
pub fn fit_ordered_logistic(
    ds: &SurveyDataset,
    train_ids: &[String],
    options: &FitOptions,
) -> Result<OrderedLogisticModel> {
    let k = ds.n_classes();
    if train_ids.is_empty() {
        return Err(AuditError::Validation("empty training set".into()));
    }
    let indices: Vec<usize> = match &options.covariate_indices {
        Some(v) => v.clone(),
        None => (0..ds.covariate_dim().unwrap_or(0)).collect(),
    };
    let p = indices.len();

    // Gather (outcome, raw covariates) for the training ids.
    let mut raw: Vec<(usize, Vec<f64>)> = Vec::with_capacity(train_ids.len());
    let mut seen = vec![false; k];
    for id in train_ids {
        let r = ds
            .respondent(id)
            .ok_or_else(|| AuditError::Validation(format!("unknown id '{id}'")))?;
        let x: Vec<f64> = if p == 0 {
            Vec::new()
        } else {
            let cov = r.covariates.as_ref().ok_or_else(|| {
                AuditError::Validation(format!("id '{id}': record has no covariates"))
            })?;
            let mut v = Vec::with_capacity(p);
            for &i in &indices {
                let value = *cov.get(i).ok_or_else(|| {
                    AuditError::Validation(format!(
                        "id '{id}': covariate index {i} out of range (dim {})",
                        cov.len()
                    ))
                })?;
                v.push(value);
            }
            v
        };
        seen[r.outcome - 1] = true;
        raw.push((r.outcome, x));
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(AuditError::Validation(
            "training outcomes contain fewer than 2 distinct classes".into(),
        ));
    }

    // Standardize covariates on the training sample; constant columns
    // keep sd 1 so they simply contribute nothing.
    let n = raw.len() as f64;
    let mut standardization = Vec::with_capacity(p);
    for j in 0..p {
        let mean = raw.iter().map(|(_, x)| x[j]).sum::<f64>() / n;
        let var = raw.iter().map(|(_, x)| (x[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        standardization.push(Standardization { mean, sd });
    }
    let rows: Vec<(usize, Vec<f64>)> = raw
        .into_iter()
        .map(|(y, x)| {
            let z = x
                .iter()
                .enumerate()
                .map(|(j, v)| (v - standardization[j].mean) / standardization[j].sd)
                .collect();
            (y, z)
        })
        .collect();

    // Initialize cutpoints at the logit of the (clamped) empirical CDF
    // and coefficients at zero.
    let mut counts = vec![0usize; k];
    for (y, _) in &rows {
        counts[y - 1] += 1;
    }
    let mut params = vec![0.0; (k - 1) + p];
    let mut cum = 0.0;
    let mut prev_theta = 0.0;
    for c in 0..k - 1 {
        cum += counts[c] as f64;
        let f = (cum / n).clamp(1e-3, 1.0 - 1e-3);
        let mut theta = (f / (1.0 - f)).ln();
        if c > 0 && theta < prev_theta + 1e-3 {
            theta = prev_theta + 1e-3;
        }
        params[c] = if c == 0 { theta } else { (theta - prev_theta).ln() };
        prev_theta = theta;
    }

    let dim = params.len();
    let (mut f, mut g) = nll_grad(&params, &rows, k, p);
    let mut h: Vec<Vec<f64>> = (0..dim)
        .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut iterations = 0;
    let mut converged = inf_norm(&g) < options.grad_tol;

    while !converged && iterations < options.max_iters {
        iterations += 1;
        let theta = cutpoints_from(&params, k);
        let beta = &params[k - 1..];
        if inf_norm(&theta).max(inf_norm(beta)) > SEPARATION_NORM {
            return Err(AuditError::Validation(format!(
                "perfect separation suspected: parameter norm exceeded {SEPARATION_NORM}"
            )));
        }
        // Search direction −H·g, reset to steepest descent if the
        // approximation has lost positive definiteness.
        let mut dir: Vec<f64> = h.iter().map(|row| -dot(row, &g)).collect();
        let mut slope = dot(&dir, &g);
        if slope >= 0.0 {
            for (i, row) in h.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = if i == j { 1.0 } else { 0.0 };
                }
            }
            dir = g.iter().map(|x| -x).collect();
            slope = dot(&dir, &g);
        }
        // Armijo backtracking from a unit step.
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = params.iter().zip(&dir).map(|(x, d)| x + t * d).collect();
            let (f_new, g_new) = nll_grad(&trial, &rows, k, p);
            if f_new.is_finite() && f_new <= f + 1e-4 * t * slope {
                accepted = Some((trial, f_new, g_new));
                break;
            }
            t *= 0.5;
        }
        let Some((params_new, f_new, g_new)) = accepted else {
            break; // stalled at numerical precision
        };
        debug_assert!(f_new <= f, "accepted step must not increase the objective");
        // BFGS inverse-Hessian update, skipped when curvature is not
        // positive enough to keep H positive definite.
        let s: Vec<f64> = params_new.iter().zip(&params).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let hy: Vec<f64> = h.iter().map(|row| dot(row, &yv)).collect();
            let yhy = dot(&yv, &hy);
            for i in 0..dim {
                for j in 0..dim {
                    h[i][j] += -rho * (s[i] * hy[j] + hy[i] * s[j])
                        + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }
        params = params_new;
        f = f_new;
        g = g_new;
        converged = inf_norm(&g) < options.grad_tol;
    }

    // Map back to the original covariate scale:
    //   β_orig = β_std / sd,  θ_orig = θ_std + Σ β_std·μ/sd.
    let theta_std = cutpoints_from(&params, k);
    let beta_std = &params[k - 1..];
    let shift: f64 = beta_std
        .iter()
        .zip(&standardization)
        .map(|(b, s)| b * s.mean / s.sd)
        .sum();
    let coefficients: Vec<f64> = beta_std
        .iter()
        .zip(&standardization)
        .map(|(b, s)| b / s.sd)
        .collect();
    let mut cutpoints: Vec<f64> = theta_std.iter().map(|t| t + shift).collect();
    for j in 1..cutpoints.len() {
        // Underflowed gaps would violate strict monotonicity.
        if cutpoints[j] <= cutpoints[j - 1] {
            cutpoints[j] = cutpoints[j - 1] + 1e-12;
        }
    }

    Ok(OrderedLogisticModel {
        n_classes: k,
        cutpoints,
        coefficients,
        covariate_indices: indices,
        standardization,
        fit_meta: FitMeta {
            iterations,
            final_nll: f,
            grad_norm: inf_norm(&g),
            converged,
        },
    })
}

impl OrderedLogisticModel {
    /// Class probabilities for one respondent's full covariate vector
    /// (the model picks out its own covariate positions).
    pub fn class_probs(&self, covariates: Option<&[f64]>) -> Result<Vec<f64>> {
        let eta = if self.covariate_indices.is_empty() {
            0.0
        } else {
            let cov = covariates.ok_or_else(|| {
                AuditError::Validation("model requires covariates but record has none".into())
            })?;
            let mut eta = 0.0;
            for (b, &i) in self.coefficients.iter().zip(&self.covariate_indices) {
                let v = *cov.get(i).ok_or_else(|| {
                    AuditError::Validation(format!(
                        "covariate index {i} out of range (dim {})",
                        cov.len()
                    ))
                })?;
                eta += b * v;
            }
            eta
        };
        let k = self.n_classes;
        let mut probs = Vec::with_capacity(k);
        let mut prev = 0.0;
        for c in 0..k {
            let cdf = if c + 1 < k {
                sigmoid(self.cutpoints[c] - eta)
            } else {
                1.0
            };
            probs.push((cdf - prev).max(0.0));
            prev = cdf;
        }
        Ok(probs)
    }

    /// One probability row per requested id.
    pub fn predict_probs(&self, ds: &SurveyDataset, ids: &[String]) -> Result<ProbabilityMatrix> {
        let mut rows = Vec::with_capacity(ids.len());
        for id in ids {
            let r = ds
                .respondent(id)
                .ok_or_else(|| AuditError::Validation(format!("unknown id '{id}'")))?;
            rows.push(self.class_probs(r.covariates.as_deref())?);
        }
        ProbabilityMatrix::new(
            "ordered-logistic",
            ids.to_vec(),
            rows,
            ProbabilityMatrix::STRICT_TOLERANCE,
        )
    }
}
