//! Feature transforms: log+1, z-standardization, and PCA with
//! cumulative-variance component selection.

use crate::error::{Error, Result};
use crate::linalg::jacobi_eigen;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

/// Entrywise ln(1 + x). Every entry must be > -1.
pub fn log1p_matrix(values: &ArrayView2<f64>) -> Result<Array2<f64>> {
    if let Some(bad) = values.iter().find(|&&v| v <= -1.0 || !v.is_finite()) {
        return Err(Error::DomainError(*bad));
    }
    Ok(values.mapv(f64::ln_1p))
}

/// Column centering/scaling parameters learned from a training matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub column_names: Vec<String>,
}

impl Standardizer {
    /// Fit per-column mean and sample SD (n-1 denominator). Constant
    /// columns are rejected.
    pub fn fit(values: &ArrayView2<f64>, column_names: &[String]) -> Result<Standardizer> {
        let n = values.nrows();
        let p = values.ncols();
        debug_assert_eq!(column_names.len(), p);
        if n < 2 {
            return Err(Error::DegenerateMatrix);
        }
        let mut means = Vec::with_capacity(p);
        let mut sds = Vec::with_capacity(p);
        for j in 0..p {
            let col = values.column(j);
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let sd = var.sqrt();
            if sd <= 0.0 || !sd.is_finite() {
                return Err(Error::ConstantColumn(column_names[j].clone()));
            }
            means.push(mean);
            sds.push(sd);
        }
        Ok(Standardizer {
            means,
            sds,
            column_names: column_names.to_vec(),
        })
    }

    /// Apply the fitted centering/scaling to a matrix with matching columns.
    pub fn apply(&self, values: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if values.ncols() != self.means.len() {
            return Err(Error::DimensionMismatch {
                expected: self.means.len(),
                got: values.ncols(),
            });
        }
        Ok(Array2::from_shape_fn(
            (values.nrows(), values.ncols()),
            |(i, j)| (values[[i, j]] - self.means[j]) / self.sds[j],
        ))
    }
}

/// PCA loadings with per-component explained-variance fractions and the
/// standardizer that produced the input scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaBasis {
    /// p x p matrix, one orthonormal loading vector per column, ordered by
    /// descending explained variance.
    pub loadings: Vec<Vec<f64>>,
    /// Fraction of total variance per component; sums to 1 over all p.
    pub explained_fraction: Vec<f64>,
    pub standardizer: Standardizer,
    /// Smallest prefix of components whose cumulative fraction exceeds the
    /// fit threshold.
    pub k_selected: usize,
    pub threshold: f64,
}

/// Eigendecomposition of the sample covariance of an already-standardized
/// matrix. Returns (loadings, explained fractions), components ordered by
/// descending variance. Sign convention: the largest-magnitude entry of
/// each loading column is positive.
pub fn pca_eigen(standardized: &ArrayView2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let n = standardized.nrows();
    let p = standardized.ncols();
    if n < 2 || p == 0 {
        return Err(Error::DegenerateMatrix);
    }
    let cov = standardized.t().dot(standardized) / (n as f64 - 1.0);
    let (mut eigenvalues, mut vectors) = jacobi_eigen(&cov);
    // Round-off can leave tiny negative eigenvalues on rank-deficient input.
    for v in eigenvalues.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let total: f64 = eigenvalues.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::DegenerateMatrix);
    }
    for k in 0..p {
        let col = vectors.column(k);
        let mut arg = 0;
        let mut best = -1.0;
        for (i, &v) in col.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                arg = i;
            }
        }
        if col[arg] < 0.0 {
            vectors.column_mut(k).mapv_inplace(|v| -v);
        }
    }
    let fractions: Vec<f64> = eigenvalues.iter().map(|&v| v / total).collect();
    Ok((vectors, fractions))
}

/// Smallest k whose cumulative explained fraction strictly exceeds
/// `threshold`; all components when no prefix does.
pub fn select_components(fractions: &[f64], threshold: f64) -> usize {
    let mut cumulative = 0.0;
    for (k, &f) in fractions.iter().enumerate() {
        cumulative += f;
        if cumulative > threshold {
            return k + 1;
        }
    }
    fractions.len()
}

impl PcaBasis {
    /// Standardize `values`, decompose, and select components at
    /// `threshold` cumulative variance.
    pub fn fit(
        values: &ArrayView2<f64>,
        column_names: &[String],
        threshold: f64,
    ) -> Result<PcaBasis> {
        let standardizer = Standardizer::fit(values, column_names)?;
        let z = standardizer.apply(values)?;
        let (vectors, fractions) = pca_eigen(&z.view())?;
        let k_selected = select_components(&fractions, threshold);
        let p = fractions.len();
        let loadings = (0..p)
            .map(|k| vectors.column(k).to_vec())
            .collect::<Vec<_>>();
        Ok(PcaBasis {
            loadings,
            explained_fraction: fractions,
            standardizer,
            k_selected,
            threshold,
        })
    }

    pub fn n_columns(&self) -> usize {
        self.standardizer.means.len()
    }

    fn loading_matrix(&self, k: usize) -> Array2<f64> {
        let p = self.n_columns();
        Array2::from_shape_fn((p, k), |(i, j)| self.loadings[j][i])
    }

    /// Factor scores for the first `k` components: standardize with the
    /// training statistics, then project onto the loadings.
    pub fn project_k(&self, values: &ArrayView2<f64>, k: usize) -> Result<Array2<f64>> {
        let z = self.standardizer.apply(values)?;
        Ok(z.dot(&self.loading_matrix(k)))
    }

    /// Factor scores for the selected components.
    pub fn project(&self, values: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.project_k(values, self.k_selected)
    }

    pub fn to_json_file(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<PcaBasis> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
