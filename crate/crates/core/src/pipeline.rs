//! End-to-end orchestration: load (or synthesize) a cohort, split 3:1,
//! impute, then fit and evaluate the screening, PCA-regression, lasso and
//! random-forest models on the held-out quarter, pooling predictions
//! across imputations.
//!
//! Every stage writes its artifacts under the output directory, so the
//! pipeline can also be driven stage by stage from the CLI; reruns with an
//! identical config are byte-identical for report.json, the ROC CSVs and
//! every intermediate table, independent of thread count.

use crate::cohort::{train_test_split, train_test_split_stratified, CohortSchema, CohortTable, SplitIndices};
use crate::error::{Error, Result};
use crate::evalx::{evaluate_pooled, format_table2, roc_csv, NamedReport};
use crate::forest::{
    default_depth_grid, default_mtry_grid, fit_forest, importance, predict_proba, tune_two_stage,
    Aggregation, RfConfig, TuneCriterion, TuneReport,
};
use crate::glm::{fit_factor_models, screen_metabolites, wald_p};
use crate::impute::{mice_pmm_with_fit_rows, rubin_pool, ImputeConfig, ImputedSet};
use crate::lasso::{lasso_across_imputations, LassoConfig};
use crate::par::try_map_indexed;
use crate::synth::{generate, SynthConfig};
use crate::transform::PcaBasis;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct DataConfig {
    /// Cohort CSV; when absent, the `synth` section generates one.
    #[serde(default)]
    pub cohort: Option<PathBuf>,
    #[serde(default)]
    pub schema: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitConfig {
    #[serde(default = "default_split_seed")]
    pub seed: u64,
    #[serde(default)]
    pub stratified: bool,
}

fn default_split_seed() -> u64 {
    42
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            seed: default_split_seed(),
            stratified: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ImputeStageConfig {
    #[serde(flatten)]
    pub config: ImputeConfig,
    /// Learn regressions and donor pools from training rows only.
    #[serde(default)]
    pub train_only: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaStageConfig {
    #[serde(default = "default_variance_threshold")]
    pub variance_threshold: f64,
}

fn default_variance_threshold() -> f64 {
    0.95
}

impl Default for PcaStageConfig {
    fn default() -> Self {
        PcaStageConfig {
            variance_threshold: default_variance_threshold(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestStageConfig {
    #[serde(default = "default_final_trees")]
    pub trees: usize,
    #[serde(default = "default_tune")]
    pub tune: bool,
    #[serde(default = "default_tune_trees")]
    pub tune_trees: usize,
    #[serde(default = "default_tune_folds")]
    pub tune_folds: usize,
    /// Candidate feature fractions; empty means the built-in grid.
    #[serde(default)]
    pub mtry_grid: Vec<f64>,
    /// Candidate depths; 0 encodes unlimited. Empty means the built-in grid.
    #[serde(default)]
    pub depth_grid: Vec<usize>,
    /// Used directly when `tune` is off.
    #[serde(default = "crate::forest::default_mtry")]
    pub mtry_fraction: f64,
    /// 0 encodes unlimited.
    #[serde(default)]
    pub max_depth: usize,
    #[serde(default = "default_min_leaf")]
    pub min_leaf: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_aggregation")]
    pub aggregation: Aggregation,
    #[serde(default = "default_tune_criterion")]
    pub criterion: TuneCriterion,
}

fn default_final_trees() -> usize {
    5000
}
fn default_tune() -> bool {
    true
}
fn default_tune_trees() -> usize {
    200
}
fn default_tune_folds() -> usize {
    3
}
fn default_min_leaf() -> usize {
    1
}
fn default_aggregation() -> Aggregation {
    Aggregation::MeanProbability
}
fn default_tune_criterion() -> TuneCriterion {
    TuneCriterion::Misclassification
}

impl Default for ForestStageConfig {
    fn default() -> Self {
        ForestStageConfig {
            trees: default_final_trees(),
            tune: default_tune(),
            tune_trees: default_tune_trees(),
            tune_folds: default_tune_folds(),
            mtry_grid: Vec::new(),
            depth_grid: Vec::new(),
            mtry_fraction: crate::forest::default_mtry(),
            max_depth: 0,
            min_leaf: default_min_leaf(),
            seed: 0,
            aggregation: default_aggregation(),
            criterion: default_tune_criterion(),
        }
    }
}

impl ForestStageConfig {
    fn base_config(&self) -> RfConfig {
        RfConfig {
            n_trees: self.trees,
            mtry_fraction: self.mtry_fraction,
            max_depth: if self.max_depth == 0 { None } else { Some(self.max_depth) },
            min_leaf: self.min_leaf,
            seed: self.seed,
            aggregation: self.aggregation,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_alpha")]
    pub screening_alpha: f64,
}

fn default_threshold() -> f64 {
    0.5
}
fn default_alpha() -> f64 {
    0.05
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: default_threshold(),
            screening_alpha: default_alpha(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelsConfig {
    #[serde(default = "default_true")]
    pub unadjusted: bool,
    #[serde(default = "default_true")]
    pub adjusted: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelsConfig {
    fn default() -> Self {
        ModelsConfig {
            unadjusted: true,
            adjusted: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct PipelineConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub impute: ImputeStageConfig,
    #[serde(default)]
    pub pca: PcaStageConfig,
    #[serde(default)]
    pub lasso: LassoConfig,
    #[serde(default)]
    pub forest: ForestStageConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub models: ModelsConfig,
}

impl PipelineConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{path:?}: {e}")))
    }

    pub fn sha256(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn variants(&self) -> Vec<bool> {
        let mut v = Vec::new();
        if self.models.unadjusted {
            v.push(false);
        }
        if self.models.adjusted {
            v.push(true);
        }
        v
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub millis: u128,
    pub status: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RunManifest {
    pub config_sha256: String,
    pub n_rows: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<StageRecord>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    fn write(&self, out_dir: &Path) {
        if let Ok(json) = serde_json::to_string_pretty(self) {
            let _ = std::fs::write(out_dir.join("manifest.json"), json);
        }
    }
}

struct StageRunner {
    manifest: RunManifest,
    out_dir: PathBuf,
}

impl StageRunner {
    fn run<T>(&mut self, name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        match f() {
            Ok(value) => {
                self.manifest.stages.push(StageRecord {
                    name: name.to_string(),
                    millis: start.elapsed().as_millis(),
                    status: "ok".to_string(),
                });
                Ok(value)
            }
            Err(e) => {
                self.manifest.stages.push(StageRecord {
                    name: name.to_string(),
                    millis: start.elapsed().as_millis(),
                    status: format!("error: {e}"),
                });
                self.manifest.write(&self.out_dir);
                Err(e.in_stage(name))
            }
        }
    }
}

fn variant_name(family: &str, adjusted: bool) -> String {
    if adjusted {
        format!("{family}_adjusted")
    } else {
        format!("{family}_unadjusted")
    }
}

/// Feature matrix over `rows`: covariates first when `adjusted`, then all
/// metabolites, raw values.
pub fn feature_matrix(
    table: &CohortTable,
    rows: &[usize],
    adjusted: bool,
) -> (Array2<f64>, Vec<String>) {
    let schema = &table.schema;
    let n_cov = if adjusted { schema.covariate_names.len() } else { 0 };
    let offset = schema.metabolite_offset();
    let n_met = schema.metabolite_names.len();
    let x = Array2::from_shape_fn((rows.len(), n_cov + n_met), |(i, j)| {
        let row = rows[i];
        if j < n_cov {
            table.values[[row, j]]
        } else {
            table.values[[row, offset + (j - n_cov)]]
        }
    });
    let mut names = Vec::new();
    names.extend_from_slice(&schema.covariate_names[..n_cov]);
    names.extend_from_slice(&schema.metabolite_names);
    (x, names)
}

/// Per-imputation test-set probabilities of one model variant.
#[derive(Debug, Clone)]
pub struct ModelPredictions {
    pub name: String,
    pub adjusted: bool,
    /// One probability vector per imputed table, test rows in order.
    pub per_imputation: Vec<Vec<f64>>,
}

/// predictions.csv: id column plus one probability column per imputation.
pub fn write_predictions(
    path: &Path,
    ids: &[String],
    per_imputation: &[Vec<f64>],
) -> Result<()> {
    let mut out = String::from("id");
    for m in 1..=per_imputation.len() {
        out.push_str(&format!(",prob_imp_{m}"));
    }
    out.push('\n');
    for (i, id) in ids.iter().enumerate() {
        out.push_str(id);
        for probs in per_imputation {
            out.push_str(&format!(",{}", probs[i]));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a predictions.csv back into per-imputation vectors.
pub fn read_predictions(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let n_cols = reader.headers()?.len();
    if n_cols < 2 {
        return Err(Error::Config(format!("{path:?}: no probability columns")));
    }
    let m = n_cols - 1;
    let mut ids = Vec::new();
    let mut per_imputation = vec![Vec::new(); m];
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        ids.push(record.get(0).unwrap_or("").to_string());
        for k in 0..m {
            let text = record.get(k + 1).unwrap_or("");
            let v: f64 = text.parse().map_err(|_| Error::UnparseableCell {
                row,
                col: format!("prob_imp_{}", k + 1),
                text: text.to_string(),
            })?;
            per_imputation[k].push(v);
        }
    }
    Ok((ids, per_imputation))
}

/// Load a table, or synthesize one (writing cohort.csv, truth.json and
/// schema.json) when no data file is configured.
fn load_or_generate(config: &PipelineConfig, out_dir: &Path) -> Result<CohortTable> {
    match (&config.data.cohort, &config.data.schema) {
        (Some(data), Some(schema_path)) => {
            let schema = CohortSchema::from_json_file(schema_path)?;
            CohortTable::load_csv(data, &schema)
        }
        (Some(_), None) => Err(Error::Config("data.cohort given without data.schema".into())),
        (None, _) => {
            let synth_config = config
                .synth
                .clone()
                .ok_or_else(|| Error::Config("neither data.cohort nor [synth] given".into()))?;
            let (table, truth) = generate(&synth_config)?;
            table.write_csv(&out_dir.join("cohort.csv"))?;
            truth.to_json_file(&out_dir.join("truth.json"))?;
            table.schema.to_json_file(&out_dir.join("schema.json"))?;
            Ok(table)
        }
    }
}

/// MICE over the full table (or training rows only), writing the imputed
/// CSVs and an imputation manifest.
pub fn stage_impute(
    table: &CohortTable,
    stage: &ImputeStageConfig,
    split: Option<&SplitIndices>,
    out_dir: &Path,
) -> Result<ImputedSet> {
    let fit_rows: Option<Vec<usize>> = if stage.train_only {
        Some(
            split
                .ok_or_else(|| Error::Config("train_only imputation needs a split".into()))?
                .train
                .clone(),
        )
    } else {
        None
    };
    let set = mice_pmm_with_fit_rows(table, &stage.config, fit_rows.as_deref())?;
    let dir = out_dir.join("imputed");
    std::fs::create_dir_all(&dir)?;
    let mut files = Vec::new();
    for (m, imputed) in set.tables.iter().enumerate() {
        let name = format!("imp_{}.csv", m + 1);
        imputed.write_csv(&dir.join(&name))?;
        files.push(name);
    }
    #[derive(Serialize)]
    struct ImputeManifest<'a> {
        config: &'a ImputeConfig,
        train_only: bool,
        chain_seeds: &'a [u64],
        visit_order: &'a [usize],
        fallback_sweeps: &'a [usize],
        files: Vec<String>,
    }
    let manifest = ImputeManifest {
        config: &set.config,
        train_only: stage.train_only,
        chain_seeds: &set.chain_seeds,
        visit_order: &set.visit_order,
        fallback_sweeps: &set.fallback_sweeps,
        files,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(set)
}

/// Bonferroni screening over the training rows of each imputed table.
pub fn stage_screen(
    tables: &[CohortTable],
    rows: &[usize],
    adjusted: bool,
    alpha: f64,
    out_path: &Path,
) -> Result<crate::glm::ScreeningResult> {
    let subsets: Vec<CohortTable> = tables.iter().map(|t| t.subset_rows(rows)).collect();
    let result = screen_metabolites(&subsets, adjusted, alpha)?;
    std::fs::write(out_path, result.to_csv_string())?;
    Ok(result)
}

#[derive(Debug, Serialize)]
struct PcaSummary {
    k_selected: usize,
    threshold: f64,
    explained_fraction_head: Vec<f64>,
    cumulative_at_k: f64,
}

/// One PCA basis per imputed table, fit on the training-row metabolites.
/// The bases depend only on the metabolite block, so both adjusted
/// variants share them.
pub fn fit_pca_bases(
    tables: &[CohortTable],
    train_rows: &[usize],
    threshold: f64,
) -> Result<Vec<PcaBasis>> {
    try_map_indexed(tables.len(), |m| {
        let table = &tables[m];
        let train_met = table.subset_rows(train_rows).metabolite_matrix();
        PcaBasis::fit(&train_met.view(), &table.schema.metabolite_names, threshold)
    })
}

/// PCA factor regression for one adjusted variant: per imputed table,
/// regress the outcome on the selected factor scores (joint model) and
/// predict the test rows. Factor-level estimates are pooled across
/// imputations for the factors CSV.
pub fn stage_pca_model(
    tables: &[CohortTable],
    split: &SplitIndices,
    bases: &[PcaBasis],
    adjusted: bool,
    out_dir: &Path,
) -> Result<ModelPredictions> {
    let name = variant_name("pca_regression", adjusted);
    let model_dir = out_dir.join("models").join(&name);
    std::fs::create_dir_all(&model_dir)?;

    struct PerImputation {
        probs: Vec<f64>,
        single: Vec<(f64, f64)>,
        joint: Vec<(f64, f64)>,
        k: usize,
        fractions: Vec<f64>,
    }

    let per_imp = try_map_indexed(tables.len(), |m| -> Result<PerImputation> {
        let table = &tables[m];
        let basis = &bases[m];
        let train_met = table.subset_rows(&split.train).metabolite_matrix();
        let k = basis.k_selected;
        let scores_train = basis.project(&train_met.view())?;
        let test_met = table.subset_rows(&split.test).metabolite_matrix();
        let scores_test = basis.project(&test_met.view())?;

        let y_train: Vec<u8> = split.train.iter().map(|&i| table.outcome[i]).collect();
        let cov_train = adjusted.then(|| {
            Array2::from_shape_fn(
                (split.train.len(), table.schema.covariate_names.len()),
                |(i, j)| table.values[[split.train[i], j]],
            )
        });
        let models = fit_factor_models(
            &scores_train.view(),
            &y_train,
            cov_train.as_ref().map(|c| c.view()).as_ref(),
            1e-8,
            100,
        )?;

        // Test-set probabilities from the joint model.
        let n_cov = if adjusted { table.schema.covariate_names.len() } else { 0 };
        let probs: Vec<f64> = (0..split.test.len())
            .map(|i| {
                let mut eta = models.joint.coefficients[0];
                for f in 0..k {
                    eta += models.joint.coefficients[1 + f] * scores_test[[i, f]];
                }
                for c in 0..n_cov {
                    eta += models.joint.coefficients[1 + k + c]
                        * table.values[[split.test[i], c]];
                }
                crate::glm::sigmoid(eta)
            })
            .collect();

        let single = models
            .single
            .iter()
            .map(|fit| (fit.coefficients[1], fit.standard_errors[1]))
            .collect();
        let joint = (0..k)
            .map(|f| {
                (
                    models.joint.coefficients[1 + f],
                    models.joint.standard_errors[1 + f],
                )
            })
            .collect();
        Ok(PerImputation {
            probs,
            single,
            joint,
            k,
            fractions: basis.explained_fraction.clone(),
        })
    })?;

    // Per-imputation basis summaries.
    let pca_dir = out_dir.join("pca");
    std::fs::create_dir_all(&pca_dir)?;
    for (m, imp) in per_imp.iter().enumerate() {
        let head = imp.fractions.iter().take(10).copied().collect::<Vec<_>>();
        let summary = PcaSummary {
            k_selected: imp.k,
            threshold: bases[m].threshold,
            cumulative_at_k: imp.fractions.iter().take(imp.k).sum(),
            explained_fraction_head: head,
        };
        std::fs::write(
            pca_dir.join(format!("imp_{}_{}.json", m + 1, if adjusted { "adjusted" } else { "unadjusted" })),
            serde_json::to_string_pretty(&summary)?,
        )?;
    }

    // Pool factor estimates across imputations over the common prefix.
    let min_k = per_imp.iter().map(|p| p.k).min().unwrap_or(0);
    let mut factors_csv = String::from("factor,model,estimate,se,p,significant\n");
    for kind in ["single", "joint"] {
        for f in 0..min_k {
            let estimates: Vec<(Vec<f64>, Vec<f64>)> = per_imp
                .iter()
                .map(|p| {
                    let (est, se) = if kind == "single" { p.single[f] } else { p.joint[f] };
                    (vec![est], vec![se * se])
                })
                .collect();
            let (point, variance) = if estimates.len() >= 2 {
                let pooled = rubin_pool(&estimates)?;
                (pooled.point[0], pooled.total_var[0])
            } else {
                (estimates[0].0[0], estimates[0].1[0])
            };
            let se = variance.sqrt();
            let p_value = wald_p(point, se);
            let significant = kind == "single" && p_value < 0.05 / min_k.max(1) as f64;
            factors_csv.push_str(&format!(
                "PC{},{},{},{},{},{}\n",
                f + 1,
                kind,
                point,
                se,
                p_value,
                significant
            ));
        }
    }
    std::fs::write(model_dir.join("factors.csv"), factors_csv)?;

    let per_imputation: Vec<Vec<f64>> = per_imp.into_iter().map(|p| p.probs).collect();
    let ids: Vec<String> = split.test.iter().map(|&i| tables[0].ids[i].clone()).collect();
    write_predictions(&model_dir.join("predictions.csv"), &ids, &per_imputation)?;
    Ok(ModelPredictions {
        name,
        adjusted,
        per_imputation,
    })
}

/// Cross-validated lasso per imputed table for one variant; writes
/// coefficients, CV curves, the active-set report, and test predictions.
pub fn stage_lasso_model(
    tables: &[CohortTable],
    split: &SplitIndices,
    adjusted: bool,
    config: &LassoConfig,
    out_dir: &Path,
) -> Result<ModelPredictions> {
    let name = variant_name("l1_regression", adjusted);
    let model_dir = out_dir.join("models").join(&name);
    std::fs::create_dir_all(&model_dir)?;

    let run = lasso_across_imputations(tables, &split.train, adjusted, config)?;
    let mut per_imputation = Vec::with_capacity(tables.len());
    for (m, fit) in run.fits.iter().enumerate() {
        let (x_test, _) = feature_matrix(&tables[m], &split.test, adjusted);
        per_imputation.push(fit.predict(&x_test.view()));

        let mut coef_csv = String::from("name,coefficient\n");
        coef_csv.push_str(&format!("(intercept),{}\n", fit.coefficients[0]));
        for (j, coef_name) in fit.names.iter().enumerate() {
            coef_csv.push_str(&format!("{},{}\n", coef_name, fit.coefficients[j + 1]));
        }
        std::fs::write(model_dir.join(format!("coef_imp_{}.csv", m + 1)), coef_csv)?;

        let mut cv_csv = String::from("lambda,mean_error,se_error\n");
        for point in &fit.cv_curve {
            cv_csv.push_str(&format!(
                "{},{},{}\n",
                point.lambda, point.mean_error, point.se_error
            ));
        }
        std::fs::write(model_dir.join(format!("cv_curve_imp_{}.csv", m + 1)), cv_csv)?;
    }

    #[derive(Serialize)]
    struct ActiveSummary<'a> {
        per_model_active: &'a [usize],
        union_size: usize,
        intersection_size: usize,
        union: &'a [String],
        intersection: &'a [String],
        lambda_selected: Vec<f64>,
    }
    let summary = ActiveSummary {
        per_model_active: &run.report.per_fit_counts,
        union_size: run.report.union.len(),
        intersection_size: run.report.intersection.len(),
        union: &run.report.union,
        intersection: &run.report.intersection,
        lambda_selected: run.fits.iter().map(|f| f.lambda_selected).collect(),
    };
    std::fs::write(
        model_dir.join("active_sets.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;

    let ids: Vec<String> = split.test.iter().map(|&i| tables[0].ids[i].clone()).collect();
    write_predictions(&model_dir.join("predictions.csv"), &ids, &per_imputation)?;
    Ok(ModelPredictions {
        name,
        adjusted,
        per_imputation,
    })
}

/// Random forest per imputed table for one variant. When tuning is on,
/// the two-stage search runs once on the first imputed table and the
/// chosen config is shared by all tables.
pub fn stage_forest_model(
    tables: &[CohortTable],
    split: &SplitIndices,
    adjusted: bool,
    stage: &ForestStageConfig,
    out_dir: &Path,
) -> Result<ModelPredictions> {
    let name = variant_name("random_forest", adjusted);
    let model_dir = out_dir.join("models").join(&name);
    std::fs::create_dir_all(&model_dir)?;

    let base = stage.base_config();
    let (config, tune_report): (RfConfig, Option<TuneReport>) = if stage.tune {
        let (x, names) = feature_matrix(&tables[0], &split.train, adjusted);
        let y: Vec<u8> = split.train.iter().map(|&i| tables[0].outcome[i]).collect();
        let mtry_grid = if stage.mtry_grid.is_empty() {
            default_mtry_grid(names.len())
        } else {
            stage.mtry_grid.clone()
        };
        let depth_grid: Vec<Option<usize>> = if stage.depth_grid.is_empty() {
            default_depth_grid()
        } else {
            stage
                .depth_grid
                .iter()
                .map(|&d| if d == 0 { None } else { Some(d) })
                .collect()
        };
        let (chosen, report) = tune_two_stage(
            &x.view(),
            &y,
            &mtry_grid,
            &depth_grid,
            stage.tune_folds,
            stage.seed,
            stage.tune_trees,
            &base,
            stage.criterion,
        )?;
        (chosen, Some(report))
    } else {
        (base, None)
    };

    if let Some(report) = &tune_report {
        std::fs::write(
            model_dir.join("tuning.json"),
            serde_json::to_string_pretty(report)?,
        )?;
    }
    std::fs::write(
        model_dir.join("config.json"),
        serde_json::to_string_pretty(&config)?,
    )?;

    struct PerImputation {
        probs: Vec<f64>,
        importance: Vec<f64>,
        names: Vec<String>,
    }
    let per_imp = try_map_indexed(tables.len(), |m| -> Result<PerImputation> {
        let table = &tables[m];
        let (x_train, names) = feature_matrix(table, &split.train, adjusted);
        let y_train: Vec<u8> = split.train.iter().map(|&i| table.outcome[i]).collect();
        let forest = fit_forest(&x_train.view(), &y_train, &config)?;
        let (x_test, _) = feature_matrix(table, &split.test, adjusted);
        let probs = predict_proba(&forest, &x_test.view());
        let imp = importance(&forest)?;
        Ok(PerImputation {
            probs,
            importance: imp,
            names,
        })
    })?;

    // Mean importance across imputations, descending.
    let names = &per_imp[0].names;
    let mf = per_imp.len() as f64;
    let mut mean_importance: Vec<(String, f64)> = (0..names.len())
        .map(|j| {
            (
                names[j].clone(),
                per_imp.iter().map(|p| p.importance[j]).sum::<f64>() / mf,
            )
        })
        .collect();
    mean_importance.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut imp_csv = String::from("name,importance\n");
    for (n, v) in &mean_importance {
        imp_csv.push_str(&format!("{n},{v}\n"));
    }
    std::fs::write(model_dir.join("importance.csv"), imp_csv)?;

    let per_imputation: Vec<Vec<f64>> = per_imp.into_iter().map(|p| p.probs).collect();
    let ids: Vec<String> = split.test.iter().map(|&i| tables[0].ids[i].clone()).collect();
    write_predictions(&model_dir.join("predictions.csv"), &ids, &per_imputation)?;
    Ok(ModelPredictions {
        name,
        adjusted,
        per_imputation,
    })
}

/// Pool each model's predictions, evaluate on the held-out labels, and
/// write report.json, per-model ROC CSVs, and the comparison table.
pub fn stage_evaluate(
    predictions: &[ModelPredictions],
    labels: &[u8],
    threshold: f64,
    out_dir: &Path,
) -> Result<Vec<NamedReport>> {
    let mut rows = Vec::with_capacity(predictions.len());
    for model in predictions {
        let report = evaluate_pooled(&model.per_imputation, labels, threshold)?;
        std::fs::write(
            out_dir.join(format!("roc_{}.csv", model.name)),
            roc_csv(&report),
        )?;
        rows.push(NamedReport {
            name: model.name.clone(),
            adjusted: model.adjusted,
            report,
        });
    }
    #[derive(Serialize)]
    struct Report<'a> {
        threshold: f64,
        models: BTreeMap<&'a str, &'a crate::evalx::EvalReport>,
    }
    let report = Report {
        threshold,
        models: rows.iter().map(|r| (r.name.as_str(), &r.report)).collect(),
    };
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    std::fs::write(out_dir.join("table2.txt"), format_table2(&rows))?;
    Ok(rows)
}

/// Run the whole experiment per the config. Returns the manifest, which is
/// also written to `<out_dir>/manifest.json` (on failure too, with the
/// failing stage recorded).
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunManifest> {
    let out_dir = config.data.out_dir.clone();
    std::fs::create_dir_all(&out_dir)?;
    let mut runner = StageRunner {
        manifest: RunManifest {
            config_sha256: config.sha256(),
            ..Default::default()
        },
        out_dir: out_dir.clone(),
    };
    runner.manifest.seeds.insert("split".into(), config.split.seed);
    runner
        .manifest
        .seeds
        .insert("impute".into(), config.impute.config.seed);
    runner.manifest.seeds.insert("lasso".into(), config.lasso.seed);
    runner.manifest.seeds.insert("forest".into(), config.forest.seed);
    if let Some(synth) = &config.synth {
        runner.manifest.seeds.insert("synth".into(), synth.seed);
    }

    let table = runner.run("load", || load_or_generate(config, &out_dir))?;
    runner.manifest.n_rows = table.n_rows();

    let split = runner.run("split", || {
        let split = if config.split.stratified {
            train_test_split_stratified(&table, config.split.seed)?
        } else {
            train_test_split(&table, config.split.seed)?
        };
        split.to_json_file(&out_dir.join("split.json"))?;
        table
            .subset_rows(&split.test)
            .write_csv(&out_dir.join("test.csv"))?;
        Ok(split)
    })?;
    runner.manifest.n_train = split.train.len();
    runner.manifest.n_test = split.test.len();

    let imputed = runner.run("impute", || {
        stage_impute(&table, &config.impute, Some(&split), &out_dir)
    })?;

    let variants = config.variants();
    runner.run("screen", || {
        for &adjusted in &variants {
            let path = out_dir.join(format!(
                "screening_{}.csv",
                if adjusted { "adjusted" } else { "unadjusted" }
            ));
            stage_screen(
                &imputed.tables,
                &split.train,
                adjusted,
                config.eval.screening_alpha,
                &path,
            )?;
        }
        Ok(())
    })?;

    let bases = runner.run("pca", || {
        fit_pca_bases(&imputed.tables, &split.train, config.pca.variance_threshold)
    })?;
    let mut predictions: Vec<ModelPredictions> = Vec::new();
    for &adjusted in &variants {
        let pca = runner.run("pca", || {
            stage_pca_model(&imputed.tables, &split, &bases, adjusted, &out_dir)
        })?;
        predictions.push(pca);
    }
    for &adjusted in &variants {
        let lasso = runner.run("lasso", || {
            stage_lasso_model(&imputed.tables, &split, adjusted, &config.lasso, &out_dir)
        })?;
        predictions.push(lasso);
    }
    for &adjusted in &variants {
        let rf = runner.run("rf", || {
            stage_forest_model(&imputed.tables, &split, adjusted, &config.forest, &out_dir)
        })?;
        predictions.push(rf);
    }

    // Stable row order for the report: family then unadjusted/adjusted.
    predictions.sort_by(|a, b| {
        let rank = |n: &str| match n.split('_').next().unwrap_or("") {
            "pca" => 0,
            "l1" => 1,
            _ => 2,
        };
        (rank(&a.name), a.adjusted).cmp(&(rank(&b.name), b.adjusted))
    });

    runner.run("evaluate", || {
        let labels: Vec<u8> = split.test.iter().map(|&i| table.outcome[i]).collect();
        stage_evaluate(&predictions, &labels, config.eval.threshold, &out_dir)
    })?;

    for entry in ["report.json", "table2.txt", "manifest.json", "split.json", "test.csv"] {
        runner.manifest.outputs.push(entry.to_string());
    }
    runner.manifest.write(&out_dir);
    Ok(runner.manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::BlockSpec;

    fn tiny_config(out_dir: PathBuf, seed: u64) -> PipelineConfig {
        PipelineConfig {
            data: DataConfig {
                cohort: None,
                schema: None,
                out_dir,
            },
            synth: Some(SynthConfig {
                n_rows: 160,
                n_metabolites: 12,
                n_true_metabolites: 3,
                effect_size: 0.8,
                confounder_strength: 0.6,
                block_structure: vec![BlockSpec { size: 6, correlation: 0.6 }],
                missing_rate: 0.03,
                seed,
                ..Default::default()
            }),
            split: SplitConfig { seed: 7, stratified: false },
            impute: ImputeStageConfig {
                config: ImputeConfig {
                    m_imputations: 2,
                    chain_iterations: 2,
                    pmm_donors: 3,
                    seed: 9,
                },
                train_only: false,
            },
            pca: PcaStageConfig { variance_threshold: 0.95 },
            lasso: LassoConfig {
                n_folds: 4,
                lambda_grid_size: 25,
                seed: 11,
                ..Default::default()
            },
            forest: ForestStageConfig {
                trees: 25,
                tune: false,
                seed: 13,
                ..Default::default()
            },
            eval: EvalConfig::default(),
            models: ModelsConfig::default(),
        }
    }

    #[test]
    fn tiny_pipeline_runs_and_is_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let manifest_a = run_pipeline(&tiny_config(dir_a.path().to_path_buf(), 3)).unwrap();
        let _manifest_b = run_pipeline(&tiny_config(dir_b.path().to_path_buf(), 3)).unwrap();
        assert!(manifest_a.stages.iter().all(|s| s.status == "ok"));

        for file in ["report.json", "table2.txt"] {
            let a = std::fs::read(dir_a.path().join(file)).unwrap();
            let b = std::fs::read(dir_b.path().join(file)).unwrap();
            assert_eq!(a, b, "{file} differs between identical runs");
        }
        // All six models present in the report.
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir_a.path().join("report.json")).unwrap())
                .unwrap();
        let models = report["models"].as_object().unwrap();
        assert_eq!(models.len(), 6);
        for name in [
            "pca_regression_unadjusted",
            "pca_regression_adjusted",
            "l1_regression_unadjusted",
            "l1_regression_adjusted",
            "random_forest_unadjusted",
            "random_forest_adjusted",
        ] {
            assert!(models.contains_key(name), "missing {name}");
            assert!(dir_a.path().join(format!("roc_{name}.csv")).exists());
        }
    }

    #[test]
    fn pipeline_aborts_cleanly_on_missing_data_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path().to_path_buf(), 1);
        config.synth = None;
        config.data.cohort = Some(dir.path().join("does_not_exist.csv"));
        config.data.schema = Some(dir.path().join("missing_schema.json"));
        let err = run_pipeline(&config).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "load", .. }));
        // The manifest records the failed stage.
        let manifest: RunManifest = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("manifest.json")).unwrap(),
        )
        .unwrap();
        assert!(manifest
            .stages
            .iter()
            .any(|s| s.name == "load" && s.status.starts_with("error")));
    }

    #[test]
    fn predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictions.csv");
        let ids = vec!["a".to_string(), "b".to_string()];
        let probs = vec![vec![0.123456789012345, 0.5], vec![1.0 / 3.0, 0.25]];
        write_predictions(&path, &ids, &probs).unwrap();
        let (read_ids, read_probs) = read_predictions(&path).unwrap();
        assert_eq!(read_ids, ids);
        for (a, b) in probs.iter().zip(&read_probs) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn toml_config_parses_with_defaults() {
        let text = r#"
[data]
out_dir = "out"

[synth]
n_rows = 100
n_metabolites = 8

[lasso]
n_folds = 5

[forest]
trees = 50
tune = false
"#;
        let config: PipelineConfig = toml::from_str(text).unwrap();
        assert_eq!(config.synth.as_ref().unwrap().n_rows, 100);
        assert_eq!(config.lasso.n_folds, 5);
        assert_eq!(config.forest.trees, 50);
        assert_eq!(config.impute.config.m_imputations, 5);
        assert_eq!(config.eval.threshold, 0.5);
        assert!(config.models.unadjusted && config.models.adjusted);
    }
}
