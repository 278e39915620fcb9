//! Multiple imputation by chained equations with predictive mean matching,
//! plus Rubin pooling of estimates and cross-imputation prediction
//! averaging.
//!
//! Each chain sweeps incomplete columns in order of increasing missingness.
//! A sweep regresses the target column on every other column (current
//! completions) by least squares over the rows where the target is
//! observed, predicts the missing rows, and replaces each missing value
//! with the observed value of a donor drawn uniformly from the
//! `pmm_donors` observed rows with the nearest prediction (type-1
//! matching, ties broken by lowest row index).
//!
//! The per-sweep regressions share one Gram matrix of the completed
//! predictor set: for each target column the contributions of its missing
//! rows are subtracted (rank-one downdates) and the target's row/column is
//! sliced out, which turns the 256 per-sweep regressions into cheap
//! Cholesky solves instead of 256 full design-matrix products.

use crate::cohort::CohortTable;
use crate::error::{Error, Result};
use crate::par::try_map_indexed;
use crate::rng::{derive_seed, rng_from_seed, Stream};
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Settings for [`mice_pmm`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImputeConfig {
    /// Number of completed tables (chains).
    #[serde(default = "default_m")]
    pub m_imputations: usize,
    /// Chained-equation sweeps per chain.
    #[serde(default = "default_iterations")]
    pub chain_iterations: usize,
    /// Donor pool size for predictive mean matching.
    #[serde(default = "default_donors")]
    pub pmm_donors: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_m() -> usize {
    5
}
fn default_iterations() -> usize {
    10
}
fn default_donors() -> usize {
    5
}

impl Default for ImputeConfig {
    fn default() -> Self {
        ImputeConfig {
            m_imputations: default_m(),
            chain_iterations: default_iterations(),
            pmm_donors: default_donors(),
            seed: 0,
        }
    }
}

impl ImputeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_imputations < 2 {
            return Err(Error::Config("m_imputations must be >= 2".into()));
        }
        if self.chain_iterations < 1 {
            return Err(Error::Config("chain_iterations must be >= 1".into()));
        }
        if self.pmm_donors < 1 {
            return Err(Error::Config("pmm_donors must be >= 1".into()));
        }
        Ok(())
    }
}

/// M completed copies of a cohort table.
#[derive(Debug, Clone)]
pub struct ImputedSet {
    pub tables: Vec<CohortTable>,
    pub source_mask: Array2<bool>,
    pub config: ImputeConfig,
    /// Column visit order used by every sweep: ascending missing count,
    /// ties by column index.
    pub visit_order: Vec<usize>,
    pub chain_seeds: Vec<u64>,
    /// Per-chain count of sweeps that fell back to unconditional donor
    /// draws because a column regression was singular.
    pub fallback_sweeps: Vec<usize>,
}

/// Run chained-equation imputation on the full table.
pub fn mice_pmm(table: &CohortTable, config: &ImputeConfig) -> Result<ImputedSet> {
    mice_pmm_with_fit_rows(table, config, None)
}

/// Variant that learns regressions and donor pools only from `fit_rows`
/// (e.g. the training split), while still completing every row.
pub fn mice_pmm_with_fit_rows(
    table: &CohortTable,
    config: &ImputeConfig,
    fit_rows: Option<&[usize]>,
) -> Result<ImputedSet> {
    config.validate()?;
    let n = table.n_rows();
    let p = table.n_features();
    let feature_names = table.schema.feature_names();

    let fit_mask: Vec<bool> = match fit_rows {
        None => vec![true; n],
        Some(rows) => {
            let mut mask = vec![false; n];
            for &r in rows {
                mask[r] = true;
            }
            mask
        }
    };

    // Missing counts per column; donors must exist among fit rows.
    let mut missing_count = vec![0usize; p];
    let mut fit_observed = vec![0usize; p];
    for i in 0..n {
        for j in 0..p {
            if table.missing[[i, j]] {
                missing_count[j] += 1;
            } else if fit_mask[i] {
                fit_observed[j] += 1;
            }
        }
    }
    let incomplete: Vec<usize> = (0..p).filter(|&j| missing_count[j] > 0).collect();
    for &j in &incomplete {
        if fit_observed[j] < config.pmm_donors + 1 {
            return Err(Error::TooFewObserved(feature_names[j].clone()));
        }
    }
    let mut visit_order = incomplete.clone();
    visit_order.sort_by_key(|&j| (missing_count[j], j));

    let chain_seeds: Vec<u64> = (0..config.m_imputations)
        .map(|c| derive_seed(config.seed, Stream::ImputeChain, c as u64))
        .collect();

    if visit_order.is_empty() {
        let tables = vec![table.clone(); config.m_imputations];
        return Ok(ImputedSet {
            tables,
            source_mask: table.missing.clone(),
            config: config.clone(),
            visit_order,
            chain_seeds,
            fallback_sweeps: vec![0; config.m_imputations],
        });
    }

    let chains = try_map_indexed(config.m_imputations, |c| {
        run_chain(table, config, &fit_mask, &visit_order, chain_seeds[c])
    })?;

    let mut tables = Vec::with_capacity(config.m_imputations);
    let mut fallback_sweeps = Vec::with_capacity(config.m_imputations);
    for (values, fallbacks) in chains {
        tables.push(CohortTable {
            schema: table.schema.clone(),
            ids: table.ids.clone(),
            values,
            missing: Array2::default((n, p)),
            outcome: table.outcome.clone(),
        });
        fallback_sweeps.push(fallbacks);
    }
    Ok(ImputedSet {
        tables,
        source_mask: table.missing.clone(),
        config: config.clone(),
        visit_order,
        chain_seeds,
        fallback_sweeps,
    })
}

/// Completed predictor block shared by the regressions of one sweep.
///
/// `z` is the completed feature matrix with a leading intercept column;
/// `gram` is z'z accumulated over fit rows only.
struct SweepState {
    z: Array2<f64>,
    gram: Array2<f64>,
    fit_mask: Vec<bool>,
}

impl SweepState {
    fn new(completed: &Array2<f64>, fit_mask: &[bool]) -> SweepState {
        let n = completed.nrows();
        let p = completed.ncols();
        let mut z = Array2::<f64>::zeros((n, p + 1));
        for i in 0..n {
            z[[i, 0]] = 1.0;
            for j in 0..p {
                z[[i, j + 1]] = completed[[i, j]];
            }
        }
        let mut state = SweepState {
            z,
            gram: Array2::zeros((p + 1, p + 1)),
            fit_mask: fit_mask.to_vec(),
        };
        state.rebuild_gram();
        state
    }

    fn rebuild_gram(&mut self) {
        let d = self.z.ncols();
        self.gram.fill(0.0);
        for (i, row) in self.z.rows().into_iter().enumerate() {
            if !self.fit_mask[i] {
                continue;
            }
            for a in 0..d {
                let ra = row[a];
                for b in a..d {
                    self.gram[[a, b]] += ra * row[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                self.gram[[a, b]] = self.gram[[b, a]];
            }
        }
    }

    /// Least-squares coefficients for regressing feature `j` on the
    /// intercept and every other feature, over fit rows where `j` is
    /// observed. `None` when the normal equations are singular.
    ///
    /// The coefficient layout matches the z columns with column `j+1`
    /// removed.
    fn regression_for(&self, j: usize, missing_fit_rows: &[usize]) -> Option<Vec<f64>> {
        let d = self.z.ncols();
        let t = j + 1;
        let mut g = self.gram.clone();
        for &r in missing_fit_rows {
            let row = self.z.row(r);
            for a in 0..d {
                let ra = row[a];
                for b in 0..d {
                    g[[a, b]] -= ra * row[b];
                }
            }
        }
        let keep: Vec<usize> = (0..d).filter(|&c| c != t).collect();
        let m = keep.len();
        let mut a = Array2::<f64>::zeros((m, m));
        let mut b = Array1::<f64>::zeros(m);
        for (ai, &ci) in keep.iter().enumerate() {
            b[ai] = g[[ci, t]];
            for (aj, &cj) in keep.iter().enumerate() {
                a[[ai, aj]] = g[[ci, cj]];
            }
        }
        let max_diag = (0..m).map(|i| a[[i, i]]).fold(0.0f64, f64::max);
        let l = crate::linalg::cholesky(&a, 1e-12 * max_diag.max(1e-300))?;
        let beta = crate::linalg::cholesky_solve(&l, &b);
        if beta.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(beta.to_vec())
    }

    /// Linear prediction for feature `j` at row `r` under `beta`.
    fn predict(&self, j: usize, r: usize, beta: &[f64]) -> f64 {
        let d = self.z.ncols();
        let t = j + 1;
        let row = self.z.row(r);
        let mut acc = 0.0;
        let mut k = 0;
        for c in 0..d {
            if c == t {
                continue;
            }
            acc += row[c] * beta[k];
            k += 1;
        }
        acc
    }

    /// Write new values into column `j` and patch the Gram row/column.
    fn update_column(&mut self, j: usize, changes: &[(usize, f64)]) {
        let d = self.z.ncols();
        let t = j + 1;
        for &(r, new) in changes {
            let old = self.z[[r, t]];
            self.z[[r, t]] = new;
            if !self.fit_mask[r] {
                continue;
            }
            let delta = new - old;
            for c in 0..d {
                if c == t {
                    continue;
                }
                let cross = delta * self.z[[r, c]];
                self.gram[[t, c]] += cross;
                self.gram[[c, t]] += cross;
            }
            self.gram[[t, t]] += new * new - old * old;
        }
    }
}

fn run_chain(
    table: &CohortTable,
    config: &ImputeConfig,
    fit_mask: &[bool],
    visit_order: &[usize],
    chain_seed: u64,
) -> Result<(Array2<f64>, usize)> {
    let n = table.n_rows();
    let mut rng = rng_from_seed(chain_seed);

    // Donor pools: fit rows where the column is observed, ascending.
    let donor_rows: Vec<Vec<usize>> = visit_order
        .iter()
        .map(|&j| {
            (0..n)
                .filter(|&i| fit_mask[i] && !table.missing[[i, j]])
                .collect()
        })
        .collect();
    let missing_rows: Vec<Vec<usize>> = visit_order
        .iter()
        .map(|&j| (0..n).filter(|&i| table.missing[[i, j]]).collect())
        .collect();

    // Initial fill: random draws from each column's observed values.
    let mut completed = table.values.clone();
    for (slot, &j) in visit_order.iter().enumerate() {
        let pool = &donor_rows[slot];
        for &r in &missing_rows[slot] {
            let donor = pool[rng.random_range(0..pool.len())];
            completed[[r, j]] = table.values[[donor, j]];
        }
    }

    let mut state = SweepState::new(&completed, fit_mask);
    let mut fallback_sweeps = 0usize;
    let mut changes: Vec<(usize, f64)> = Vec::new();

    for _ in 0..config.chain_iterations {
        state.rebuild_gram();
        for (slot, &j) in visit_order.iter().enumerate() {
            let pool = &donor_rows[slot];
            let to_fill = &missing_rows[slot];
            let missing_fit: Vec<usize> = to_fill.iter().copied().filter(|&r| fit_mask[r]).collect();

            changes.clear();
            match state.regression_for(j, &missing_fit) {
                Some(beta) => {
                    let pred_pool: Vec<f64> =
                        pool.iter().map(|&r| state.predict(j, r, &beta)).collect();
                    if pred_pool.iter().any(|v| !v.is_finite()) {
                        fallback_sweeps += 1;
                        for &r in to_fill {
                            let donor = pool[rng.random_range(0..pool.len())];
                            changes.push((r, table.values[[donor, j]]));
                        }
                    } else {
                        for &r in to_fill {
                            let target = state.predict(j, r, &beta);
                            let donor =
                                pick_donor(&mut rng, pool, &pred_pool, target, config.pmm_donors);
                            changes.push((r, table.values[[donor, j]]));
                        }
                    }
                }
                None => {
                    fallback_sweeps += 1;
                    for &r in to_fill {
                        let donor = pool[rng.random_range(0..pool.len())];
                        changes.push((r, table.values[[donor, j]]));
                    }
                }
            }
            state.update_column(j, &changes);
        }
    }

    // Copy the completed predictor block back out of z.
    let p = table.n_features();
    let mut out = Array2::<f64>::zeros((n, p));
    for i in 0..n {
        for j in 0..p {
            out[[i, j]] = state.z[[i, j + 1]];
        }
    }
    Ok((out, fallback_sweeps))
}

/// Uniform draw among the `k` pool rows whose predictions are nearest to
/// `target`; distance ties resolve to the lower row index.
fn pick_donor(
    rng: &mut crate::rng::SeededRng,
    pool: &[usize],
    pred_pool: &[f64],
    target: f64,
    k: usize,
) -> usize {
    let mut candidates: Vec<(f64, usize)> = pool
        .iter()
        .zip(pred_pool)
        .map(|(&r, &p)| ((p - target).abs(), r))
        .collect();
    let k = k.min(candidates.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, cmp);
        candidates.truncate(k);
    }
    candidates.sort_by(cmp);
    candidates[rng.random_range(0..k)].1
}

/// Rubin-pooled point estimate and variance decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    pub point: Vec<f64>,
    pub within_var: Vec<f64>,
    pub between_var: Vec<f64>,
    /// within + (1 + 1/M) * between, componentwise.
    pub total_var: Vec<f64>,
}

/// Pool M per-imputation (estimate, variance) vectors.
pub fn rubin_pool(estimates: &[(Vec<f64>, Vec<f64>)]) -> Result<PooledEstimate> {
    let m = estimates.len();
    if m < 2 {
        return Err(Error::Config("rubin_pool needs at least 2 imputations".into()));
    }
    let len = estimates[0].0.len();
    for (points, vars) in estimates {
        if points.len() != len {
            return Err(Error::LengthMismatch(points.len(), len));
        }
        if vars.len() != len {
            return Err(Error::LengthMismatch(vars.len(), len));
        }
    }
    let mf = m as f64;
    let mut point = vec![0.0; len];
    let mut within = vec![0.0; len];
    for (points, vars) in estimates {
        for i in 0..len {
            point[i] += points[i] / mf;
            within[i] += vars[i] / mf;
        }
    }
    let mut between = vec![0.0; len];
    for (points, _) in estimates {
        for i in 0..len {
            between[i] += (points[i] - point[i]).powi(2) / (mf - 1.0);
        }
    }
    let total: Vec<f64> = within
        .iter()
        .zip(&between)
        .map(|(&w, &b)| w + (1.0 + 1.0 / mf) * b)
        .collect();
    Ok(PooledEstimate {
        point,
        within_var: within,
        between_var: between,
        total_var: total,
    })
}

/// Componentwise mean of M probability vectors.
pub fn pool_predictions(prob_vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    if prob_vectors.is_empty() {
        return Err(Error::EmptyInput);
    }
    let len = prob_vectors[0].len();
    for v in prob_vectors {
        if v.len() != len {
            return Err(Error::LengthMismatch(v.len(), len));
        }
        if let Some(&bad) = v.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::OutOfRange(bad));
        }
    }
    let mf = prob_vectors.len() as f64;
    let mut out = vec![0.0; len];
    for v in prob_vectors {
        for i in 0..len {
            out[i] += v[i];
        }
    }
    for o in out.iter_mut() {
        *o /= mf;
    }
    Ok(out)
}
