//! Cohort tables: schema, CSV ingestion/validation, train/test splitting,
//! and population summaries.
//!
//! A table holds one row per participant, a binary outcome, named covariate
//! columns and named metabolite columns. Missing feature cells are tracked
//! in a boolean mask; the matching value slot holds NaN and is never read.

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fmt;
use std::path::Path;

/// Column layout of a cohort file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSchema {
    pub id_name: String,
    pub outcome_name: String,
    pub covariate_names: Vec<String>,
    pub metabolite_names: Vec<String>,
}

impl CohortSchema {
    pub fn validate(&self) -> Result<()> {
        if self.metabolite_names.is_empty() {
            return Err(Error::InvalidSchema("metabolite list is empty".into()));
        }
        let mut seen = HashSet::new();
        for name in self.all_names() {
            if !seen.insert(name.clone()) {
                return Err(Error::InvalidSchema(format!("duplicate name '{name}'")));
            }
        }
        Ok(())
    }

    fn all_names(&self) -> Vec<String> {
        let mut names = vec![self.id_name.clone(), self.outcome_name.clone()];
        names.extend(self.covariate_names.iter().cloned());
        names.extend(self.metabolite_names.iter().cloned());
        names
    }

    /// Feature columns in table order: covariates first, then metabolites.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = self.covariate_names.clone();
        names.extend(self.metabolite_names.iter().cloned());
        names
    }

    pub fn n_features(&self) -> usize {
        self.covariate_names.len() + self.metabolite_names.len()
    }

    /// Column index of the first metabolite within the feature matrix.
    pub fn metabolite_offset(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let schema: CohortSchema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// One participant table: feature matrix with missingness mask plus outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortTable {
    pub schema: CohortSchema,
    pub ids: Vec<String>,
    /// n x p feature values; NaN where `missing` is true.
    pub values: Array2<f64>,
    pub missing: Array2<bool>,
    /// 0/1 outcome, fully observed.
    pub outcome: Vec<u8>,
}

impl CohortTable {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_complete(&self) -> bool {
        !self.missing.iter().any(|&m| m)
    }

    pub fn n_missing(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    pub fn has_both_classes(&self) -> bool {
        self.outcome.iter().any(|&y| y == 1) && self.outcome.iter().any(|&y| y == 0)
    }

    /// Load and validate a cohort CSV against `schema`.
    ///
    /// Empty cells and the literal `NA` mark missing values; everything
    /// else must parse as a finite number. Outcome cells must be 0 or 1
    /// and never missing.
    pub fn load_csv(path: &Path, schema: &CohortSchema) -> Result<CohortTable> {
        schema.validate()?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let headers = reader.headers()?.clone();
        let col_of = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };

        let id_col = col_of(&schema.id_name)?;
        let outcome_col = col_of(&schema.outcome_name)?;
        let feature_names = schema.feature_names();
        let feature_cols: Vec<usize> = feature_names
            .iter()
            .map(|n| col_of(n))
            .collect::<Result<_>>()?;

        let mut ids = Vec::new();
        let mut outcome = Vec::new();
        let mut flat_values: Vec<f64> = Vec::new();
        let mut flat_missing: Vec<bool> = Vec::new();

        for (row_idx, record) in reader.records().enumerate() {
            let record = record?;
            ids.push(record.get(id_col).unwrap_or("").to_string());

            let raw_outcome = record.get(outcome_col).unwrap_or("");
            if raw_outcome.is_empty() || raw_outcome == "NA" {
                return Err(Error::MissingOutcome(row_idx));
            }
            let y: f64 = raw_outcome.parse().map_err(|_| Error::NonBinaryOutcome {
                row: row_idx,
                text: raw_outcome.to_string(),
            })?;
            if y == 0.0 {
                outcome.push(0u8);
            } else if y == 1.0 {
                outcome.push(1u8);
            } else {
                return Err(Error::NonBinaryOutcome {
                    row: row_idx,
                    text: raw_outcome.to_string(),
                });
            }

            for (j, &col) in feature_cols.iter().enumerate() {
                let cell = record.get(col).unwrap_or("");
                if cell.is_empty() || cell == "NA" {
                    flat_values.push(f64::NAN);
                    flat_missing.push(true);
                } else {
                    let v: f64 = cell.parse().map_err(|_| Error::UnparseableCell {
                        row: row_idx,
                        col: feature_names[j].clone(),
                        text: cell.to_string(),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::UnparseableCell {
                            row: row_idx,
                            col: feature_names[j].clone(),
                            text: cell.to_string(),
                        });
                    }
                    flat_values.push(v);
                    flat_missing.push(false);
                }
            }
        }

        let n = ids.len();
        let p = feature_names.len();
        let values = Array2::from_shape_vec((n, p), flat_values).expect("shape");
        let missing = Array2::from_shape_vec((n, p), flat_missing).expect("shape");
        Ok(CohortTable {
            schema: schema.clone(),
            ids,
            values,
            missing,
            outcome,
        })
    }

    /// Write the table back to CSV. Missing cells become empty fields, so a
    /// reload reproduces values, mask and outcome exactly.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let mut header = vec![self.schema.id_name.clone(), self.schema.outcome_name.clone()];
        header.extend(self.schema.feature_names());
        writer.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut record = vec![self.ids[i].clone(), self.outcome[i].to_string()];
            for j in 0..self.n_features() {
                if self.missing[[i, j]] {
                    record.push(String::new());
                } else {
                    record.push(format!("{}", self.values[[i, j]]));
                }
            }
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }

    /// New table containing the given rows, in the given order.
    pub fn subset_rows(&self, rows: &[usize]) -> CohortTable {
        let p = self.n_features();
        let mut values = Array2::<f64>::zeros((rows.len(), p));
        let mut missing = Array2::<bool>::default((rows.len(), p));
        for (dst, &src) in rows.iter().enumerate() {
            for j in 0..p {
                values[[dst, j]] = self.values[[src, j]];
                missing[[dst, j]] = self.missing[[src, j]];
            }
        }
        CohortTable {
            schema: self.schema.clone(),
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            values,
            missing,
            outcome: rows.iter().map(|&i| self.outcome[i]).collect(),
        }
    }

    /// Copy of the metabolite block of the feature matrix.
    pub fn metabolite_matrix(&self) -> Array2<f64> {
        let off = self.schema.metabolite_offset();
        let m = self.schema.metabolite_names.len();
        Array2::from_shape_fn((self.n_rows(), m), |(i, j)| self.values[[i, off + j]])
    }

    /// Copy of the covariate block of the feature matrix.
    pub fn covariate_matrix(&self) -> Array2<f64> {
        let c = self.schema.covariate_names.len();
        Array2::from_shape_fn((self.n_rows(), c), |(i, j)| self.values[[i, j]])
    }

    pub fn summarize(&self) -> CohortSummary {
        let outcome_pos = self.outcome.iter().filter(|&&y| y == 1).count();
        let n = self.n_rows();
        let feature_names = self.schema.feature_names();
        let columns = feature_names
            .iter()
            .enumerate()
            .map(|(j, name)| summarize_column(name, self, j))
            .collect();
        CohortSummary {
            n_rows: n,
            outcome_name: self.schema.outcome_name.clone(),
            outcome_positive: outcome_pos,
            outcome_percent: if n > 0 {
                100.0 * outcome_pos as f64 / n as f64
            } else {
                0.0
            },
            columns,
        }
    }
}

/// Per-column entry of a population summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSummary {
    pub name: String,
    pub n_observed: usize,
    pub n_missing: usize,
    /// Mean and sample SD over observed entries, for continuous columns.
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    /// Count and percent of ones over observed entries, for 0/1 columns.
    pub count_positive: Option<usize>,
    pub percent: Option<f64>,
}

/// Table-1 style description of a cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortSummary {
    pub n_rows: usize,
    pub outcome_name: String,
    pub outcome_positive: usize,
    pub outcome_percent: f64,
    pub columns: Vec<ColumnSummary>,
}

fn summarize_column(name: &str, table: &CohortTable, j: usize) -> ColumnSummary {
    let observed: Vec<f64> = (0..table.n_rows())
        .filter(|&i| !table.missing[[i, j]])
        .map(|i| table.values[[i, j]])
        .collect();
    let n_obs = observed.len();
    let n_missing = table.n_rows() - n_obs;
    if n_obs == 0 {
        return ColumnSummary {
            name: name.to_string(),
            n_observed: 0,
            n_missing,
            mean: None,
            sd: None,
            count_positive: None,
            percent: None,
        };
    }
    let binary = observed.iter().all(|&v| v == 0.0 || v == 1.0);
    if binary {
        let ones = observed.iter().filter(|&&v| v == 1.0).count();
        ColumnSummary {
            name: name.to_string(),
            n_observed: n_obs,
            n_missing,
            mean: None,
            sd: None,
            count_positive: Some(ones),
            percent: Some(100.0 * ones as f64 / n_obs as f64),
        }
    } else {
        let mean = observed.iter().sum::<f64>() / n_obs as f64;
        let sd = if n_obs > 1 {
            (observed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_obs - 1) as f64).sqrt()
        } else {
            0.0
        };
        ColumnSummary {
            name: name.to_string(),
            n_observed: n_obs,
            n_missing,
            mean: Some(mean),
            sd: Some(sd),
            count_positive: None,
            percent: None,
        }
    }
}

impl fmt::Display for CohortSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n = {}", self.n_rows)?;
        writeln!(
            f,
            "{} present: {} ({:.1}%)",
            self.outcome_name, self.outcome_positive, self.outcome_percent
        )?;
        for col in &self.columns {
            match (col.mean, col.count_positive) {
                (Some(mean), _) => writeln!(
                    f,
                    "{}: {:.2} ± {:.2}  (missing {})",
                    col.name,
                    mean,
                    col.sd.unwrap_or(0.0),
                    col.n_missing
                )?,
                (None, Some(ones)) => writeln!(
                    f,
                    "{}: {} ({:.1}%)  (missing {})",
                    col.name,
                    ones,
                    col.percent.unwrap_or(0.0),
                    col.n_missing
                )?,
                (None, None) => writeln!(f, "{}: all missing", col.name)?,
            }
        }
        Ok(())
    }
}

/// A seeded 3:1 train/test partition of row indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub ratio: (u32, u32),
    pub stratified: bool,
}

/// Split rows 3:1 into train/test; the test set holds `floor(n/4)` rows
/// chosen uniformly at random from `seed`.
pub fn train_test_split(table: &CohortTable, seed: u64) -> Result<SplitIndices> {
    split_rows(table.n_rows(), &table.outcome, seed, false)
}

/// Stratified variant: the test quarter preserves outcome proportions via
/// largest-remainder allocation across classes.
pub fn train_test_split_stratified(table: &CohortTable, seed: u64) -> Result<SplitIndices> {
    split_rows(table.n_rows(), &table.outcome, seed, true)
}

fn split_rows(n: usize, outcome: &[u8], seed: u64, stratified: bool) -> Result<SplitIndices> {
    if n < 8 {
        return Err(Error::TooFewRows(n));
    }
    let n_test = n / 4;
    let mut rng = stream_rng(seed, Stream::Split, 0);
    let mut test: Vec<usize> = if !stratified {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order[..n_test].to_vec()
    } else {
        let classes: [Vec<usize>; 2] = {
            let mut zeros = Vec::new();
            let mut ones = Vec::new();
            for (i, &y) in outcome.iter().enumerate() {
                if y == 1 {
                    ones.push(i)
                } else {
                    zeros.push(i)
                }
            }
            [zeros, ones]
        };
        // floor(n_c/4) per class, remaining slots by largest fractional part.
        let mut counts = [0usize; 2];
        let mut fracs = [0f64; 2];
        for (c, rows) in classes.iter().enumerate() {
            let exact = rows.len() as f64 * n_test as f64 / n as f64;
            counts[c] = (exact.floor() as usize).min(rows.len());
            fracs[c] = exact - exact.floor();
        }
        let mut assigned: usize = counts.iter().sum();
        while assigned < n_test {
            let pick = if fracs[0] >= fracs[1] && counts[0] < classes[0].len() {
                0
            } else {
                1
            };
            counts[pick] += 1;
            fracs[pick] = -1.0;
            assigned += 1;
        }
        let mut picked = Vec::with_capacity(n_test);
        for (c, rows) in classes.iter().enumerate() {
            let mut rows = rows.clone();
            rows.shuffle(&mut rng);
            picked.extend_from_slice(&rows[..counts[c]]);
        }
        picked
    };
    test.sort_unstable();
    let in_test: HashSet<usize> = test.iter().copied().collect();
    let train: Vec<usize> = (0..n).filter(|i| !in_test.contains(i)).collect();
    Ok(SplitIndices {
        train,
        test,
        seed,
        ratio: (3, 1),
        stratified,
    })
}

impl SplitIndices {
    pub fn to_json_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
