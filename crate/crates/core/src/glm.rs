//! Unpenalized logistic regression by iteratively reweighted least
//! squares, Wald inference, Bonferroni screening of individual metabolites,
//! and the factor regression models.

use crate::cohort::CohortSchema;
use crate::cohort::CohortTable;
use crate::error::{Error, Result};
use crate::impute::rubin_pool;
use crate::linalg::{cholesky, cholesky_solve, spd_inverse};
use crate::par::map_indexed;
use crate::transform::log1p_matrix;
use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

/// Result of one IRLS fit. `coefficients[0]` is the intercept.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlmFit {
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub log_likelihood: f64,
    pub converged: bool,
    /// Set when the coefficient norm ran away (perfect separation).
    pub diverged: bool,
    pub iterations: usize,
    /// Log-likelihood after each iteration; non-decreasing by step-halving.
    pub ll_trace: Vec<f64>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(x)) without overflow.
fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn log_likelihood(eta: &Array1<f64>, y: &[u8]) -> f64 {
    eta.iter()
        .zip(y)
        .map(|(&e, &yi)| f64::from(yi) * e - log1p_exp(e))
        .sum()
}

const DIVERGENCE_NORM: f64 = 1e3;

/// Fit a logistic regression on a design matrix that already contains the
/// intercept column.
///
/// Converges when the score norm `max|X'(y - mu)|` falls below `tol`.
/// Perfect separation is reported (`diverged`, `converged = false`), not
/// raised as an error, so screening sweeps survive pathological columns.
pub fn fit_logistic(x: &ArrayView2<f64>, y: &[u8], tol: f64, max_iter: usize) -> Result<GlmFit> {
    let n = x.nrows();
    let p = x.ncols();
    if n != y.len() {
        return Err(Error::LengthMismatch(n, y.len()));
    }
    let n_pos = y.iter().filter(|&&v| v == 1).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::NoClassVariation);
    }
    if n <= p {
        return Err(Error::SingularInformation);
    }

    let yf: Array1<f64> = Array1::from_iter(y.iter().map(|&v| f64::from(v)));
    let mut beta = Array1::<f64>::zeros(p);
    let mut eta = Array1::<f64>::zeros(n);
    let mut ll = log_likelihood(&eta, y);
    let mut ll_trace = Vec::new();
    let mut converged = false;
    let mut diverged = false;
    let mut iterations = 0;

    for iter in 0..max_iter {
        iterations = iter + 1;
        let mu = eta.mapv(sigmoid);
        let residual = &yf - &mu;
        let score = x.t().dot(&residual);
        if score.iter().all(|g| g.abs() < tol) {
            converged = true;
            iterations = iter;
            break;
        }

        // Newton step on the weighted normal equations.
        let mut h = Array2::<f64>::zeros((p, p));
        for i in 0..n {
            let w = (mu[i] * (1.0 - mu[i])).max(1e-10);
            let row = x.row(i);
            for a in 0..p {
                let wa = w * row[a];
                for b in a..p {
                    h[[a, b]] += wa * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                h[[a, b]] = h[[b, a]];
            }
        }
        let max_abs_eta = eta.iter().fold(0.0f64, |m, &e| m.max(e.abs()));
        let l = match cholesky(&h, 0.0) {
            Some(l) => l,
            None => {
                if max_abs_eta > 30.0 {
                    diverged = true;
                    break;
                }
                return Err(Error::SingularInformation);
            }
        };
        let delta = cholesky_solve(&l, &score);

        // Step-halving keeps the likelihood non-decreasing.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &beta + &(&delta * step);
            let cand_eta = x.dot(&candidate);
            let cand_ll = log_likelihood(&cand_eta, y);
            if cand_ll >= ll - 1e-12 {
                beta = candidate;
                eta = cand_eta;
                ll = cand_ll;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        ll_trace.push(ll);
        if !accepted {
            break;
        }
        if beta.iter().any(|b| b.abs() > DIVERGENCE_NORM) {
            diverged = true;
            break;
        }
    }

    // Perfect separation: the fitted linear predictor develops a wide gap
    // between the classes. The score can still stall below `tol` once the
    // probabilities pin to 0/1, so this overrides the convergence flag —
    // no finite optimum exists.
    if !diverged {
        let mut min_pos = f64::INFINITY;
        let mut max_neg = f64::NEG_INFINITY;
        for (i, &yi) in y.iter().enumerate() {
            if yi == 1 {
                min_pos = min_pos.min(eta[i]);
            } else {
                max_neg = max_neg.max(eta[i]);
            }
        }
        if min_pos - max_neg > 10.0 {
            diverged = true;
            converged = false;
        }
    }

    // Observed information at the final estimate.
    let mu = eta.mapv(sigmoid);
    let mut h = Array2::<f64>::zeros((p, p));
    for i in 0..n {
        let w = (mu[i] * (1.0 - mu[i])).max(1e-10);
        let row = x.row(i);
        for a in 0..p {
            let wa = w * row[a];
            for b in a..p {
                h[[a, b]] += wa * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            h[[a, b]] = h[[b, a]];
        }
    }
    let standard_errors = match spd_inverse(&h) {
        Some(inv) => (0..p).map(|j| inv[[j, j]].max(0.0).sqrt()).collect(),
        None => {
            if converged {
                return Err(Error::SingularInformation);
            }
            vec![f64::INFINITY; p]
        }
    };

    Ok(GlmFit {
        coefficients: beta.to_vec(),
        standard_errors,
        log_likelihood: ll,
        converged,
        diverged,
        iterations,
        ll_trace,
    })
}

/// Two-sided Wald p-value against the normal reference.
pub fn wald_p(coefficient: f64, std_error: f64) -> f64 {
    if !std_error.is_finite() || std_error <= 0.0 {
        return 1.0;
    }
    let z = (coefficient / std_error).abs();
    statrs::function::erf::erfc(z / std::f64::consts::SQRT_2)
}

/// One metabolite's screening outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScreeningRecord {
    pub name: String,
    pub coefficient: Option<f64>,
    pub std_error: Option<f64>,
    pub p_value: Option<f64>,
    pub significant: bool,
    pub error: Option<String>,
}

/// Per-metabolite screening results with the Bonferroni family size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScreeningResult {
    pub records: Vec<ScreeningRecord>,
    pub n_tests: usize,
    pub alpha: f64,
}

impl ScreeningResult {
    pub fn threshold(&self) -> f64 {
        self.alpha / self.n_tests as f64
    }

    pub fn n_significant(&self) -> usize {
        self.records.iter().filter(|r| r.significant).count()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("name,estimate,se,p,significant\n");
        for r in &self.records {
            let fmt = |v: Option<f64>| v.map_or(String::from("NA"), |x| format!("{x}"));
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.name,
                fmt(r.coefficient),
                fmt(r.std_error),
                fmt(r.p_value),
                r.significant
            ));
        }
        out
    }
}

/// Screen every metabolite: regress the outcome on its log+1-transformed
/// values (plus the clinical covariates when `adjusted`), one fit per
/// imputed table, pooled over imputations, flagged at the Bonferroni
/// threshold `alpha / n_metabolites`.
///
/// Per-feature failures are recorded in the result, not raised.
pub fn screen_metabolites(
    tables: &[CohortTable],
    adjusted: bool,
    alpha: f64,
) -> Result<ScreeningResult> {
    if tables.is_empty() {
        return Err(Error::EmptyInput);
    }
    let schema: &CohortSchema = &tables[0].schema;
    let n_tests = schema.metabolite_names.len();
    let offset = schema.metabolite_offset();
    let n_cov = schema.covariate_names.len();
    let threshold = alpha / n_tests as f64;

    let records = map_indexed(n_tests, |met| {
        let name = schema.metabolite_names[met].clone();
        let col = offset + met;
        let mut points = Vec::with_capacity(tables.len());
        let mut variances = Vec::with_capacity(tables.len());
        for table in tables {
            let n = table.n_rows();
            let raw = Array2::from_shape_fn((n, 1), |(i, _)| table.values[[i, col]]);
            let logged = match log1p_matrix(&raw.view()) {
                Ok(m) => m,
                Err(e) => {
                    return ScreeningRecord {
                        name,
                        coefficient: None,
                        std_error: None,
                        p_value: None,
                        significant: false,
                        error: Some(e.to_string()),
                    }
                }
            };
            let width = 2 + if adjusted { n_cov } else { 0 };
            let design = Array2::from_shape_fn((n, width), |(i, j)| match j {
                0 => 1.0,
                1 => logged[[i, 0]],
                _ => table.values[[i, j - 2]],
            });
            match fit_logistic(&design.view(), &table.outcome, 1e-8, 100) {
                Ok(fit) => {
                    points.push(vec![fit.coefficients[1]]);
                    variances.push(vec![fit.standard_errors[1].powi(2)]);
                }
                Err(e) => {
                    return ScreeningRecord {
                        name,
                        coefficient: None,
                        std_error: None,
                        p_value: None,
                        significant: false,
                        error: Some(e.to_string()),
                    }
                }
            }
        }
        let (coefficient, variance) = if points.len() >= 2 {
            let estimates: Vec<(Vec<f64>, Vec<f64>)> =
                points.into_iter().zip(variances).collect();
            let pooled = rubin_pool(&estimates).expect("equal lengths by construction");
            (pooled.point[0], pooled.total_var[0])
        } else {
            (points[0][0], variances[0][0])
        };
        let std_error = variance.sqrt();
        let p_value = wald_p(coefficient, std_error);
        ScreeningRecord {
            name,
            coefficient: Some(coefficient),
            std_error: Some(std_error),
            p_value: Some(p_value),
            significant: p_value < threshold,
            error: None,
        }
    });

    Ok(ScreeningResult {
        records,
        n_tests,
        alpha,
    })
}

/// Fits of the factor regressions: one logistic model per factor score and
/// one joint model over all of them.
#[derive(Debug, Clone)]
pub struct FactorModels {
    pub single: Vec<GlmFit>,
    pub joint: GlmFit,
    pub k: usize,
}

/// Regress the outcome on PCA factor scores: k single-factor models plus
/// the joint model, with covariates appended when given. Single-factor
/// significance is judged against the Bonferroni threshold over k tests.
pub fn fit_factor_models(
    scores: &ArrayView2<f64>,
    y: &[u8],
    covariates: Option<&ArrayView2<f64>>,
    tol: f64,
    max_iter: usize,
) -> Result<FactorModels> {
    let n = scores.nrows();
    let k = scores.ncols();
    if k == 0 {
        return Err(Error::DegenerateMatrix);
    }
    let n_cov = covariates.map_or(0, |c| c.ncols());
    if let Some(c) = covariates {
        if c.nrows() != n {
            return Err(Error::LengthMismatch(c.nrows(), n));
        }
    }

    let single = (0..k)
        .map(|f| {
            let design = Array2::from_shape_fn((n, 2 + n_cov), |(i, j)| match j {
                0 => 1.0,
                1 => scores[[i, f]],
                _ => covariates.expect("n_cov > 0")[[i, j - 2]],
            });
            fit_logistic(&design.view(), y, tol, max_iter)
        })
        .collect::<Result<Vec<_>>>()?;

    let joint_design = Array2::from_shape_fn((n, 1 + k + n_cov), |(i, j)| {
        if j == 0 {
            1.0
        } else if j <= k {
            scores[[i, j - 1]]
        } else {
            covariates.expect("n_cov > 0")[[i, j - 1 - k]]
        }
    });
    let joint = fit_logistic(&joint_design.view(), y, tol, max_iter)?;

    Ok(FactorModels { single, joint, k })
}
