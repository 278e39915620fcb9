//! L1-penalized logistic regression: cyclic coordinate descent on the
//! IRLS quadratic approximation, a warm-started descending lambda path,
//! and K-fold cross-validated penalty selection with optional unpenalized
//! confounders.
//!
//! The descent state lives on the standardized scale (penalized columns
//! centered and scaled); reported coefficients are mapped back to the
//! original scale. Active-set cycling: each quadratic subproblem converges
//! on the current support, then one full sweep admits violators, until a
//! full sweep moves nothing.

use crate::cohort::CohortTable;
use crate::error::{Error, Result};
use crate::folds::{fold_complement, kfold_indices};
use crate::glm::sigmoid;
use crate::par::try_map_indexed;
use crate::rng::{derive_seed, Stream};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Validation-error criterion for the cross-validated penalty choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvCriterion {
    /// Mean binomial deviance (default).
    Deviance,
    /// Misclassification rate at threshold 0.5.
    Misclassification,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoConfig {
    #[serde(default = "default_folds")]
    pub n_folds: usize,
    #[serde(default = "default_grid_size")]
    pub lambda_grid_size: usize,
    #[serde(default = "default_min_ratio")]
    pub lambda_min_ratio: f64,
    #[serde(default)]
    pub penalize_covariates: bool,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_sweeps")]
    pub max_sweeps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_criterion")]
    pub criterion: CvCriterion,
    /// Standardize with full-data statistics inside CV instead of
    /// training-fold statistics.
    #[serde(default)]
    pub global_standardize: bool,
}

fn default_folds() -> usize {
    50
}
fn default_grid_size() -> usize {
    100
}
fn default_min_ratio() -> f64 {
    1e-3
}
fn default_tol() -> f64 {
    1e-7
}
fn default_max_sweeps() -> usize {
    10_000
}
fn default_criterion() -> CvCriterion {
    CvCriterion::Deviance
}

impl Default for LassoConfig {
    fn default() -> Self {
        LassoConfig {
            n_folds: default_folds(),
            lambda_grid_size: default_grid_size(),
            lambda_min_ratio: default_min_ratio(),
            penalize_covariates: false,
            tol: default_tol(),
            max_sweeps: default_max_sweeps(),
            seed: 0,
            criterion: default_criterion(),
            global_standardize: false,
        }
    }
}

impl LassoConfig {
    pub fn validate(&self, n_rows: usize) -> Result<()> {
        if self.n_folds < 2 || self.n_folds > n_rows {
            return Err(Error::FoldTooSmall {
                rows: n_rows,
                folds: self.n_folds,
            });
        }
        if !(self.lambda_min_ratio > 0.0 && self.lambda_min_ratio < 1.0) {
            return Err(Error::Config("lambda_min_ratio must be in (0,1)".into()));
        }
        if self.lambda_grid_size < 2 {
            return Err(Error::Config("lambda_grid_size must be >= 2".into()));
        }
        Ok(())
    }
}

/// Column-major design with penalized columns standardized in place.
#[derive(Debug, Clone)]
pub struct StandardizedDesign {
    pub cols: Vec<Vec<f64>>,
    pub penalized: Vec<bool>,
    pub names: Vec<String>,
    /// Centering/scaling per column; identity for unpenalized columns.
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub n: usize,
}

impl StandardizedDesign {
    /// Standardize columns with statistics from `x` itself. Unpenalized
    /// columns are standardized too — a pure reparametrization (the
    /// back-transform restores original-scale coefficients exactly) that
    /// keeps the descent well conditioned. Constant penalized columns
    /// degrade to all-zero (never selected).
    pub fn fit(x: &ArrayView2<f64>, penalized: &[bool], names: &[String]) -> StandardizedDesign {
        let n = x.nrows();
        let p = x.ncols();
        let mut means = vec![0.0; p];
        let mut sds = vec![1.0; p];
        for j in 0..p {
            let col = x.column(j);
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            means[j] = mean;
            sds[j] = if var > 1e-24 { var.sqrt() } else { 1.0 };
        }
        Self::with_scaling(x, penalized, names, means, sds)
    }

    /// Standardize with externally supplied statistics.
    pub fn with_scaling(
        x: &ArrayView2<f64>,
        penalized: &[bool],
        names: &[String],
        means: Vec<f64>,
        sds: Vec<f64>,
    ) -> StandardizedDesign {
        let n = x.nrows();
        let p = x.ncols();
        let cols = (0..p)
            .map(|j| {
                (0..n)
                    .map(|i| (x[[i, j]] - means[j]) / sds[j])
                    .collect::<Vec<f64>>()
            })
            .collect();
        StandardizedDesign {
            cols,
            penalized: penalized.to_vec(),
            names: names.to_vec(),
            means,
            sds,
            n,
        }
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }
}

/// Descent state on the standardized scale.
#[derive(Debug, Clone)]
pub struct CdState {
    pub intercept: f64,
    pub beta: Vec<f64>,
    pub converged: bool,
    pub sweeps: usize,
}

impl CdState {
    pub fn zeros(p: usize) -> CdState {
        CdState {
            intercept: 0.0,
            beta: vec![0.0; p],
            converged: false,
            sweeps: 0,
        }
    }

    pub fn active_count(&self, penalized: &[bool]) -> usize {
        self.beta
            .iter()
            .zip(penalized)
            .filter(|&(&b, &pen)| pen && b != 0.0)
            .count()
    }
}

const MU_CLAMP: f64 = 1e-9;
const MAX_OUTER: usize = 100;

fn clamp_mu(mu: f64) -> f64 {
    mu.clamp(MU_CLAMP, 1.0 - MU_CLAMP)
}

fn soft_threshold(a: f64, lambda: f64) -> f64 {
    if a > lambda {
        a - lambda
    } else if a < -lambda {
        a + lambda
    } else {
        0.0
    }
}

/// Penalized objective: mean logistic loss plus the L1 term over
/// penalized coordinates, on the design's scale.
pub fn objective(design: &StandardizedDesign, y: &[u8], lambda: f64, state: &CdState) -> f64 {
    let n = design.n;
    let mut eta = vec![state.intercept; n];
    for (j, col) in design.cols.iter().enumerate() {
        let b = state.beta[j];
        if b != 0.0 {
            for i in 0..n {
                eta[i] += b * col[i];
            }
        }
    }
    let loss: f64 = eta
        .iter()
        .zip(y)
        .map(|(&e, &yi)| {
            let log1pexp = if e > 0.0 {
                e + (-e).exp().ln_1p()
            } else {
                e.exp().ln_1p()
            };
            log1pexp - f64::from(yi) * e
        })
        .sum::<f64>()
        / n as f64;
    let penalty: f64 = state
        .beta
        .iter()
        .zip(&design.penalized)
        .filter(|&(_, &pen)| pen)
        .map(|(&b, _)| b.abs())
        .sum::<f64>()
        * lambda;
    loss + penalty
}

/// Fit at one penalty value, warm-started from `state`.
///
/// Structure: proximal Newton with cyclic coordinate descent restricted to
/// the working set (nonzero plus unpenalized coordinates), then one
/// full-gradient pass over all coordinates with the true residual; any
/// coordinate violating its subgradient bound joins the working set and
/// the solve repeats. The working set only grows within one call, so the
/// loop terminates, and the final pass doubles as the KKT certificate.
/// Non-convergence within `max_sweeps` is reported on the state, keeping
/// the last iterate.
pub fn cd_fit(
    design: &StandardizedDesign,
    y: &[u8],
    lambda: f64,
    state: &mut CdState,
    config: &LassoConfig,
) {
    let n = design.n;
    let p = design.n_cols();
    let nf = n as f64;
    state.converged = false;
    state.sweeps = 0;

    let mut eta = vec![state.intercept; n];
    for (j, col) in design.cols.iter().enumerate() {
        let b = state.beta[j];
        if b != 0.0 {
            for i in 0..n {
                eta[i] += b * col[i];
            }
        }
    }

    let mut w = vec![0.0f64; n];
    let mut u = vec![0.0f64; n];
    let mut wxx = vec![0.0f64; p];
    let mut in_set = vec![false; p];
    let mut active: Vec<usize> = Vec::with_capacity(p.min(64));
    for j in 0..p {
        if state.beta[j] != 0.0 || !design.penalized[j] {
            in_set[j] = true;
            active.push(j);
        }
    }

    loop {
        // --- Restricted proximal Newton on the working set. ---
        let mut inner_converged = false;
        for _outer in 0..MAX_OUTER {
            let mut sum_w = 0.0;
            for i in 0..n {
                let mu = clamp_mu(sigmoid(eta[i]));
                w[i] = (mu * (1.0 - mu)).max(1e-10);
                u[i] = f64::from(y[i]) - mu;
                sum_w += w[i];
            }
            for &j in &active {
                let col = &design.cols[j];
                let mut acc = 0.0;
                for i in 0..n {
                    acc += w[i] * col[i] * col[i];
                }
                wxx[j] = acc / nf;
            }
            let expansion_intercept = state.intercept;
            let expansion_beta: Vec<f64> = active.iter().map(|&j| state.beta[j]).collect();

            // CD on the quadratic until a sweep no longer moves anything.
            loop {
                let mut max_delta: f64 = 0.0;
                let delta0 = u.iter().sum::<f64>() / sum_w;
                if delta0 != 0.0 {
                    state.intercept += delta0;
                    for i in 0..n {
                        u[i] -= w[i] * delta0;
                    }
                    max_delta = delta0.abs();
                }
                for &j in &active {
                    if wxx[j] <= 1e-12 {
                        continue;
                    }
                    let col = &design.cols[j];
                    let mut grad = 0.0;
                    for i in 0..n {
                        grad += col[i] * u[i];
                    }
                    grad /= nf;
                    let num = grad + wxx[j] * state.beta[j];
                    let new = if design.penalized[j] {
                        soft_threshold(num, lambda) / wxx[j]
                    } else {
                        num / wxx[j]
                    };
                    let delta = new - state.beta[j];
                    if delta != 0.0 {
                        state.beta[j] = new;
                        for i in 0..n {
                            u[i] -= w[i] * col[i] * delta;
                        }
                        max_delta = max_delta.max(delta.abs());
                    }
                }
                state.sweeps += 1;
                if max_delta < config.tol || state.sweeps >= config.max_sweeps {
                    break;
                }
            }

            // Move eta to the new iterate.
            let delta0 = state.intercept - expansion_intercept;
            if delta0 != 0.0 {
                for e in eta.iter_mut() {
                    *e += delta0;
                }
            }
            let mut outer_delta = delta0.abs();
            for (slot, &j) in active.iter().enumerate() {
                let delta = state.beta[j] - expansion_beta[slot];
                if delta != 0.0 {
                    let col = &design.cols[j];
                    for i in 0..n {
                        eta[i] += delta * col[i];
                    }
                }
                outer_delta = outer_delta.max(delta.abs());
            }
            if outer_delta < config.tol {
                inner_converged = true;
                break;
            }
            if state.sweeps >= config.max_sweeps {
                return; // budget exhausted; keep the iterate
            }
        }

        // --- Full pass with the true residual: admit violators. ---
        let residual: Vec<f64> = eta
            .iter()
            .zip(y)
            .map(|(&e, &yi)| f64::from(yi) - sigmoid(e))
            .collect();
        state.sweeps += 1;
        let mut grew = false;
        for j in 0..p {
            if in_set[j] {
                continue;
            }
            let col = &design.cols[j];
            let mut g = 0.0;
            for i in 0..n {
                g += col[i] * residual[i];
            }
            if g.abs() / nf > lambda {
                in_set[j] = true;
                active.push(j);
                grew = true;
            }
        }
        if !grew {
            state.converged = inner_converged;
            return;
        }
        if state.sweeps >= config.max_sweeps {
            return;
        }
    }
}

/// Fit with every penalized coordinate pinned at zero: the null model of
/// the path (intercept plus unpenalized covariates).
pub fn fit_null(design: &StandardizedDesign, y: &[u8], config: &LassoConfig) -> CdState {
    let mut state = CdState::zeros(design.n_cols());
    cd_fit(design, y, f64::MAX, &mut state, config);
    state
}

/// Descending log-spaced penalty grid.
///
/// The top of the grid is the smallest penalty with an all-zero penalized
/// fit: `max_j |x_j'(y - mu_null)| / n`, where `mu_null` comes from the
/// null model (the mean of `y` when there are no unpenalized covariates).
pub fn lambda_path(
    design: &StandardizedDesign,
    y: &[u8],
    config: &LassoConfig,
) -> (Vec<f64>, CdState) {
    let null = fit_null(design, y, config);
    let n = design.n;
    let mut residual = vec![0.0f64; n];
    for i in 0..n {
        let mut eta = null.intercept;
        for (j, col) in design.cols.iter().enumerate() {
            if !design.penalized[j] && null.beta[j] != 0.0 {
                eta += null.beta[j] * col[i];
            }
        }
        residual[i] = f64::from(y[i]) - sigmoid(eta);
    }
    let mut lambda_max: f64 = 0.0;
    for (j, col) in design.cols.iter().enumerate() {
        if !design.penalized[j] {
            continue;
        }
        let g: f64 = col.iter().zip(&residual).map(|(&x, &r)| x * r).sum::<f64>() / n as f64;
        lambda_max = lambda_max.max(g.abs());
    }
    if lambda_max <= 0.0 {
        lambda_max = 1e-3; // degenerate: no penalized signal at all
    }
    // Relative headroom so the top of the path stays all-zero under the
    // last-ulp drift of the warm-started descent.
    lambda_max *= 1.0 + 1e-12;
    let k = config.lambda_grid_size;
    let ratio = config.lambda_min_ratio;
    let grid: Vec<f64> = (0..k)
        .map(|i| lambda_max * ratio.powf(i as f64 / (k as f64 - 1.0)))
        .collect();
    (grid, null)
}

/// Fit the whole path with warm starts; `states[k]` matches `lambdas[k]`.
pub fn path_fit(
    design: &StandardizedDesign,
    y: &[u8],
    lambdas: &[f64],
    warm: &CdState,
    config: &LassoConfig,
) -> Vec<CdState> {
    let mut states = Vec::with_capacity(lambdas.len());
    let mut current = warm.clone();
    for &lambda in lambdas {
        cd_fit(design, y, lambda, &mut current, config);
        states.push(current.clone());
    }
    states
}

/// Max KKT residuals of `state` at `lambda`: `(active, inactive)` where
/// active is `max | |g_j| - lambda |` over nonzero penalized coordinates
/// and inactive is `max(|g_j| - lambda, 0)` over zero ones, with
/// `g_j = x_j'(y - mu)/n`.
pub fn kkt_residuals(
    design: &StandardizedDesign,
    y: &[u8],
    lambda: f64,
    state: &CdState,
) -> (f64, f64) {
    let n = design.n;
    let mut eta = vec![state.intercept; n];
    for (j, col) in design.cols.iter().enumerate() {
        let b = state.beta[j];
        if b != 0.0 {
            for i in 0..n {
                eta[i] += b * col[i];
            }
        }
    }
    let residual: Vec<f64> = eta
        .iter()
        .zip(y)
        .map(|(&e, &yi)| f64::from(yi) - sigmoid(e))
        .collect();
    let mut active_dev: f64 = 0.0;
    let mut inactive_excess: f64 = 0.0;
    for (j, col) in design.cols.iter().enumerate() {
        if !design.penalized[j] {
            continue;
        }
        let g: f64 = col.iter().zip(&residual).map(|(&x, &r)| x * r).sum::<f64>() / n as f64;
        if state.beta[j] != 0.0 {
            active_dev = active_dev.max((g.abs() - lambda).abs());
        } else {
            inactive_excess = inactive_excess.max(g.abs() - lambda);
        }
    }
    (active_dev, inactive_excess.max(0.0))
}

/// One point of the cross-validation curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvPoint {
    pub lambda: f64,
    pub mean_error: f64,
    pub se_error: f64,
}

/// A cross-validated penalized fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LassoFit {
    pub lambda_selected: f64,
    /// Original-scale coefficients, intercept first.
    pub coefficients: Vec<f64>,
    /// Standardized-scale coefficients, intercept first (certificates).
    pub coefficients_std: Vec<f64>,
    /// Names of penalized columns with nonzero coefficients.
    pub active_set: Vec<String>,
    pub cv_curve: Vec<CvPoint>,
    pub converged: bool,
    pub names: Vec<String>,
    pub penalized: Vec<bool>,
}

impl LassoFit {
    /// Probabilities from original-scale features.
    pub fn predict(&self, x: &ArrayView2<f64>) -> Vec<f64> {
        let p = self.names.len();
        debug_assert_eq!(x.ncols(), p);
        (0..x.nrows())
            .map(|i| {
                let mut eta = self.coefficients[0];
                for j in 0..p {
                    eta += self.coefficients[j + 1] * x[[i, j]];
                }
                sigmoid(eta)
            })
            .collect()
    }
}

fn validation_error(
    design_val: &StandardizedDesign,
    y_val: &[u8],
    state: &CdState,
    criterion: CvCriterion,
) -> f64 {
    let n = design_val.n;
    let mut eta = vec![state.intercept; n];
    for (j, col) in design_val.cols.iter().enumerate() {
        let b = state.beta[j];
        if b != 0.0 {
            for i in 0..n {
                eta[i] += b * col[i];
            }
        }
    }
    match criterion {
        CvCriterion::Deviance => {
            eta.iter()
                .zip(y_val)
                .map(|(&e, &yi)| {
                    let mu = sigmoid(e).clamp(1e-12, 1.0 - 1e-12);
                    -2.0 * (f64::from(yi) * mu.ln() + (1.0 - f64::from(yi)) * (1.0 - mu).ln())
                })
                .sum::<f64>()
                / n as f64
        }
        CvCriterion::Misclassification => {
            eta.iter()
                .zip(y_val)
                .filter(|&(&e, &yi)| (sigmoid(e) >= 0.5) != (yi == 1))
                .count() as f64
                / n as f64
        }
    }
}

fn subset_matrix(x: &ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), x.ncols()), |(i, j)| x[[rows[i], j]])
}

/// Cross-validate the penalty on a seeded fold split, then refit on all
/// rows at the selected value.
///
/// Fold models standardize penalized columns with training-fold statistics
/// unless `global_standardize` is set. The error curve is averaged over
/// folds per lambda and the argmin taken, ties resolved toward the larger
/// (sparser) penalty.
pub fn cv_select(
    x: &ArrayView2<f64>,
    y: &[u8],
    penalized: &[bool],
    names: &[String],
    config: &LassoConfig,
) -> Result<LassoFit> {
    let n = x.nrows();
    config.validate(n)?;
    if y.len() != n {
        return Err(Error::LengthMismatch(y.len(), n));
    }

    let full_design = StandardizedDesign::fit(x, penalized, names);
    let (lambdas, null_state) = lambda_path(&full_design, y, config);

    let folds = kfold_indices(n, config.n_folds, derive_seed(config.seed, Stream::LassoFolds, 0))?;
    let fold_errors: Vec<Vec<f64>> = try_map_indexed(folds.len(), |f| -> Result<Vec<f64>> {
        let val_rows = &folds[f];
        let train_rows = fold_complement(&folds, f, n);
        let x_train = subset_matrix(x, &train_rows);
        let y_train: Vec<u8> = train_rows.iter().map(|&i| y[i]).collect();
        let design = if config.global_standardize {
            StandardizedDesign::with_scaling(
                &x_train.view(),
                penalized,
                names,
                full_design.means.clone(),
                full_design.sds.clone(),
            )
        } else {
            StandardizedDesign::fit(&x_train.view(), penalized, names)
        };
        let warm = fit_null(&design, &y_train, config);
        let states = path_fit(&design, &y_train, &lambdas, &warm, config);

        let x_val = subset_matrix(x, val_rows);
        let y_val: Vec<u8> = val_rows.iter().map(|&i| y[i]).collect();
        let design_val = StandardizedDesign::with_scaling(
            &x_val.view(),
            penalized,
            names,
            design.means.clone(),
            design.sds.clone(),
        );
        Ok(states
            .iter()
            .map(|s| validation_error(&design_val, &y_val, s, config.criterion))
            .collect())
    })?;

    let k_folds = folds.len() as f64;
    let mut cv_curve = Vec::with_capacity(lambdas.len());
    for (li, &lambda) in lambdas.iter().enumerate() {
        let mean = fold_errors.iter().map(|e| e[li]).sum::<f64>() / k_folds;
        let var = fold_errors
            .iter()
            .map(|e| (e[li] - mean).powi(2))
            .sum::<f64>()
            / (k_folds - 1.0);
        cv_curve.push(CvPoint {
            lambda,
            mean_error: mean,
            se_error: (var / k_folds).sqrt(),
        });
    }

    // Grid is descending, so the first strict minimum is the largest
    // lambda attaining it.
    let mut best = 0;
    for (i, point) in cv_curve.iter().enumerate() {
        if point.mean_error < cv_curve[best].mean_error {
            best = i;
        }
    }
    let lambda_selected = lambdas[best];

    // Final fit on all rows, warm-started down the path to the selection.
    let final_states = path_fit(&full_design, y, &lambdas[..=best], &null_state, config);
    let final_state = final_states.last().expect("non-empty path").clone();

    let p = x.ncols();
    let mut coefficients = vec![0.0; p + 1];
    let mut coefficients_std = vec![0.0; p + 1];
    coefficients_std[0] = final_state.intercept;
    let mut intercept = final_state.intercept;
    for j in 0..p {
        coefficients_std[j + 1] = final_state.beta[j];
        coefficients[j + 1] = final_state.beta[j] / full_design.sds[j];
        intercept -= final_state.beta[j] * full_design.means[j] / full_design.sds[j];
    }
    coefficients[0] = intercept;
    let active_set: Vec<String> = (0..p)
        .filter(|&j| penalized[j] && final_state.beta[j] != 0.0)
        .map(|j| names[j].clone())
        .collect();

    Ok(LassoFit {
        lambda_selected,
        coefficients,
        coefficients_std,
        active_set,
        cv_curve,
        converged: final_state.converged,
        names: names.to_vec(),
        penalized: penalized.to_vec(),
    })
}

/// Active-set overlap report across per-imputation fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActiveSetReport {
    pub per_fit_counts: Vec<usize>,
    pub union: Vec<String>,
    pub intersection: Vec<String>,
}

pub fn active_set_report(active_sets: &[Vec<String>]) -> ActiveSetReport {
    let per_fit_counts = active_sets.iter().map(Vec::len).collect();
    let mut union: BTreeSet<String> = BTreeSet::new();
    for set in active_sets {
        union.extend(set.iter().cloned());
    }
    let intersection: Vec<String> = union
        .iter()
        .filter(|name| active_sets.iter().all(|s| s.contains(name)))
        .cloned()
        .collect();
    ActiveSetReport {
        per_fit_counts,
        union: union.into_iter().collect(),
        intersection,
    }
}

/// Outcome of running the cross-validated lasso on each imputed table.
#[derive(Debug)]
pub struct LassoRun {
    pub fits: Vec<LassoFit>,
    pub report: ActiveSetReport,
}

/// One cross-validated fit per imputed table, over the given rows
/// (typically the training split), with covariates included unpenalized
/// when `adjusted`.
pub fn lasso_across_imputations(
    tables: &[CohortTable],
    rows: &[usize],
    adjusted: bool,
    config: &LassoConfig,
) -> Result<LassoRun> {
    if tables.is_empty() {
        return Err(Error::EmptyInput);
    }
    let fits = try_map_indexed(tables.len(), |m| {
        let table = &tables[m];
        let (x, names, penalized) = design_for_table(table, rows, adjusted, config);
        let y: Vec<u8> = rows.iter().map(|&i| table.outcome[i]).collect();
        cv_select(&x.view(), &y, &penalized, &names, config)
    })?;
    let sets: Vec<Vec<String>> = fits.iter().map(|f| f.active_set.clone()).collect();
    Ok(LassoRun {
        report: active_set_report(&sets),
        fits,
    })
}

/// Feature matrix for a penalized fit: optional covariates (unpenalized
/// unless configured otherwise) followed by all metabolites.
pub fn design_for_table(
    table: &CohortTable,
    rows: &[usize],
    adjusted: bool,
    config: &LassoConfig,
) -> (Array2<f64>, Vec<String>, Vec<bool>) {
    let schema = &table.schema;
    let n_cov = if adjusted { schema.covariate_names.len() } else { 0 };
    let offset = schema.metabolite_offset();
    let n_met = schema.metabolite_names.len();
    let p = n_cov + n_met;
    let x = Array2::from_shape_fn((rows.len(), p), |(i, j)| {
        let row = rows[i];
        if j < n_cov {
            table.values[[row, j]]
        } else {
            table.values[[row, offset + (j - n_cov)]]
        }
    });
    let mut names = Vec::with_capacity(p);
    let mut penalized = Vec::with_capacity(p);
    for j in 0..n_cov {
        names.push(schema.covariate_names[j].clone());
        penalized.push(config.penalize_covariates);
    }
    for j in 0..n_met {
        names.push(schema.metabolite_names[j].clone());
        penalized.push(true);
    }
    (x, names, penalized)
}
