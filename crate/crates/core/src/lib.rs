//! Metabolomic CAD-risk modelling toolkit.
//!
//! Implements the full tabular pipeline: cohort ingestion and 3:1
//! splitting, multiple imputation by chained equations with predictive
//! mean matching, log+1/z-score transforms with PCA factor extraction,
//! logistic regression (single-feature screening with Bonferroni
//! correction and factor models), L1-penalized logistic regression with
//! cross-validated penalty selection, random forest classification with
//! two-stage tuning, and a pooled ROC/AUC evaluation layer. A synthetic
//! cohort generator provides seeded, structure-controlled test data.
//!
//! Every randomized step takes an explicit seed and produces identical
//! output for any thread count; the `parallel` feature (default) turns on
//! rayon for the data-parallel inner loops.

pub mod cohort;
pub mod error;
pub mod evalx;
pub mod folds;
pub mod forest;
pub mod glm;
pub mod impute;
pub mod lasso;
pub mod linalg;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod transform;

pub use error::{Error, Result};
