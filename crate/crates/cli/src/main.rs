//! `cadmet` — cohort loading, imputation, model fitting and evaluation
//! from the command line, stage by stage or as one `run`.

use anyhow::{bail, Context, Result};
use cadmet_core::cohort::{
    train_test_split, train_test_split_stratified, CohortSchema, CohortTable, SplitIndices,
};
use cadmet_core::impute::ImputeConfig;
use cadmet_core::lasso::LassoConfig;
use cadmet_core::pipeline::{
    self, read_predictions, run_pipeline, ForestStageConfig, ImputeStageConfig, ModelPredictions,
    PipelineConfig,
};
use cadmet_core::synth::{generate, SynthConfig};
use cadmet_core::transform::PcaBasis;
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "cadmet",
    version,
    about = "Metabolomic CAD-risk modelling: imputation, PCA/lasso/forest fits, pooled evaluation"
)]
struct Cli {
    /// Worker threads for data-parallel stages (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TableArgs {
    /// Schema JSON (outcome, covariate and metabolite column names).
    #[arg(long)]
    schema: PathBuf,
    /// Cohort CSV.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct ImputedArgs {
    /// Schema JSON.
    #[arg(long)]
    schema: PathBuf,
    /// Directory of completed tables (imp_1.csv, imp_2.csv, ...).
    #[arg(long)]
    imputed: PathBuf,
    /// Optional split.json; fits use the training rows and predictions
    /// cover the test rows.
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with planted ground truth.
    Synth {
        /// Generator config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for cohort.csv, truth.json and schema.json.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Validate a cohort CSV against a schema and print its summary.
    Load {
        #[command(flatten)]
        table: TableArgs,
    },
    /// Split rows 3:1 into train and test sets.
    Split {
        #[command(flatten)]
        table: TableArgs,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Preserve outcome proportions in the test quarter.
        #[arg(long)]
        stratified: bool,
        /// Output directory for split.json and test.csv.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Complete missing cells by chained-equation imputation.
    Impute {
        #[command(flatten)]
        table: TableArgs,
        #[arg(long, default_value_t = 5)]
        m: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 5)]
        donors: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Learn regressions/donors from training rows only (needs --split).
        #[arg(long)]
        train_only: bool,
        #[arg(long)]
        split: Option<PathBuf>,
        /// Output directory; imputed tables land in <out>/imputed/.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Per-metabolite screening with Bonferroni correction.
    Screen {
        #[command(flatten)]
        imputed: ImputedArgs,
        /// Adjust for the clinical covariates.
        #[arg(long)]
        adjusted: bool,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Output CSV (name, estimate, se, p, significant).
        #[arg(long, default_value = "screening.csv")]
        out: PathBuf,
    },
    /// PCA basis and factor scores for one completed table.
    Pca {
        #[command(flatten)]
        table: TableArgs,
        /// Cumulative explained-variance cutoff for component selection.
        #[arg(long, default_value_t = 0.95)]
        threshold: f64,
        /// Two outputs: basis JSON and scores CSV.
        #[arg(long, num_args = 2, default_values = ["basis.json", "scores.csv"])]
        out: Vec<PathBuf>,
    },
    /// Cross-validated L1-penalized logistic regression per imputed table.
    Lasso {
        #[command(flatten)]
        imputed: ImputedArgs,
        #[arg(long, default_value_t = 50)]
        folds: usize,
        #[arg(long)]
        adjusted: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Penalize the covariates too instead of forcing them in.
        #[arg(long)]
        penalize_covariates: bool,
        /// Select by misclassification rate instead of deviance.
        #[arg(long)]
        misclassification: bool,
        /// Standardize with full-data statistics inside CV.
        #[arg(long)]
        global_standardize: bool,
        #[arg(long, default_value = "lasso")]
        out: PathBuf,
    },
    /// Random forest with optional two-stage tuning.
    Rf {
        #[command(flatten)]
        imputed: ImputedArgs,
        #[arg(long, default_value_t = 5000)]
        trees: usize,
        /// Run the two-stage (mtry x depth, then mtry) cross-validation.
        #[arg(long)]
        tune: bool,
        #[arg(long, default_value_t = 200)]
        tune_trees: usize,
        #[arg(long, default_value_t = 3)]
        tune_folds: usize,
        /// Feature fraction per split when not tuning.
        #[arg(long, default_value_t = 1.0 / 3.0)]
        mtry: f64,
        #[arg(long)]
        adjusted: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Serialize each fitted forest to JSON (large files).
        #[arg(long)]
        dump_model: bool,
        #[arg(long, default_value = "rf")]
        out: PathBuf,
    },
    /// Pool per-imputation predictions and emit the metric report.
    Evaluate {
        /// Model directories, each containing predictions.csv.
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        /// Held-out rows as a cohort CSV (labels come from the outcome column).
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Report path; ROC CSVs are written next to it.
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Full pipeline from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override every stage seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_imputed_tables(args: &ImputedArgs) -> Result<(Vec<CohortTable>, Option<SplitIndices>)> {
    let schema = CohortSchema::from_json_file(&args.schema)?;
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&args.imputed)
        .with_context(|| format!("reading {:?}", args.imputed))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("imp_") && n.ends_with(".csv"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no imp_*.csv files in {:?}", args.imputed);
    }
    let tables: Vec<CohortTable> = paths
        .iter()
        .map(|p| CohortTable::load_csv(p, &schema).with_context(|| format!("loading {p:?}")))
        .collect::<Result<_>>()?;
    let split = match &args.split {
        Some(path) => Some(SplitIndices::from_json_file(path)?),
        None => None,
    };
    Ok((tables, split))
}

fn split_or_all(tables: &[CohortTable], split: &Option<SplitIndices>) -> SplitIndices {
    match split {
        Some(s) => s.clone(),
        None => {
            let n = tables[0].n_rows();
            SplitIndices {
                train: (0..n).collect(),
                test: Vec::new(),
                seed: 0,
                ratio: (3, 1),
                stratified: false,
            }
        }
    }
}

fn run_command(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, seed, out } => {
            let mut synth_config = match config {
                Some(path) => SynthConfig::from_json_file(&path)?,
                None => SynthConfig::default(),
            };
            if let Some(seed) = seed {
                synth_config.seed = seed;
            }
            std::fs::create_dir_all(&out)?;
            let (table, truth) = generate(&synth_config)?;
            table.write_csv(&out.join("cohort.csv"))?;
            truth.to_json_file(&out.join("truth.json"))?;
            table.schema.to_json_file(&out.join("schema.json"))?;
            println!(
                "wrote {} rows x {} metabolites to {:?}",
                table.n_rows(),
                table.schema.metabolite_names.len(),
                out.join("cohort.csv")
            );
            Ok(())
        }
        Command::Load { table } => {
            let schema = CohortSchema::from_json_file(&table.schema)?;
            let cohort = CohortTable::load_csv(&table.data, &schema)?;
            println!(
                "{} rows, {} features, {} missing cells",
                cohort.n_rows(),
                cohort.n_features(),
                cohort.n_missing()
            );
            print!("{}", cohort.summarize());
            Ok(())
        }
        Command::Split {
            table,
            seed,
            stratified,
            out,
        } => {
            let schema = CohortSchema::from_json_file(&table.schema)?;
            let cohort = CohortTable::load_csv(&table.data, &schema)?;
            let split = if stratified {
                train_test_split_stratified(&cohort, seed)?
            } else {
                train_test_split(&cohort, seed)?
            };
            std::fs::create_dir_all(&out)?;
            split.to_json_file(&out.join("split.json"))?;
            cohort
                .subset_rows(&split.test)
                .write_csv(&out.join("test.csv"))?;
            println!("train {} / test {}", split.train.len(), split.test.len());
            Ok(())
        }
        Command::Impute {
            table,
            m,
            iters,
            donors,
            seed,
            train_only,
            split,
            out,
        } => {
            let schema = CohortSchema::from_json_file(&table.schema)?;
            let cohort = CohortTable::load_csv(&table.data, &schema)?;
            let split = match split {
                Some(path) => Some(SplitIndices::from_json_file(&path)?),
                None => None,
            };
            let stage = ImputeStageConfig {
                config: ImputeConfig {
                    m_imputations: m,
                    chain_iterations: iters,
                    pmm_donors: donors,
                    seed,
                },
                train_only,
            };
            std::fs::create_dir_all(&out)?;
            let set = pipeline::stage_impute(&cohort, &stage, split.as_ref(), &out)?;
            println!(
                "wrote {} completed tables to {:?} ({} cells imputed each)",
                set.tables.len(),
                out.join("imputed"),
                cohort.n_missing()
            );
            Ok(())
        }
        Command::Screen {
            imputed,
            adjusted,
            alpha,
            out,
        } => {
            let (tables, split) = load_imputed_tables(&imputed)?;
            let split = split_or_all(&tables, &split);
            let result = pipeline::stage_screen(&tables, &split.train, adjusted, alpha, &out)?;
            println!(
                "{} of {} metabolites significant at {:.6e}",
                result.n_significant(),
                result.n_tests,
                result.threshold()
            );
            Ok(())
        }
        Command::Pca {
            table,
            threshold,
            out,
        } => {
            let schema = CohortSchema::from_json_file(&table.schema)?;
            let cohort = CohortTable::load_csv(&table.data, &schema)?;
            if !cohort.is_complete() {
                bail!("PCA needs a completed table; run impute first");
            }
            let met = cohort.metabolite_matrix();
            let basis = PcaBasis::fit(&met.view(), &schema.metabolite_names, threshold)?;
            basis.to_json_file(&out[0])?;
            let scores = basis.project(&met.view())?;
            let mut csv = String::from("id");
            for k in 1..=basis.k_selected {
                csv.push_str(&format!(",PC{k}"));
            }
            csv.push('\n');
            for i in 0..cohort.n_rows() {
                csv.push_str(&cohort.ids[i]);
                for k in 0..basis.k_selected {
                    csv.push_str(&format!(",{}", scores[[i, k]]));
                }
                csv.push('\n');
            }
            std::fs::write(&out[1], csv)?;
            println!(
                "{} components cover {:.4} of variance",
                basis.k_selected,
                basis
                    .explained_fraction
                    .iter()
                    .take(basis.k_selected)
                    .sum::<f64>()
            );
            Ok(())
        }
        Command::Lasso {
            imputed,
            folds,
            adjusted,
            seed,
            penalize_covariates,
            misclassification,
            global_standardize,
            out,
        } => {
            let (tables, split) = load_imputed_tables(&imputed)?;
            let split = split_or_all(&tables, &split);
            let config = LassoConfig {
                n_folds: folds,
                seed,
                penalize_covariates,
                criterion: if misclassification {
                    cadmet_core::lasso::CvCriterion::Misclassification
                } else {
                    cadmet_core::lasso::CvCriterion::Deviance
                },
                global_standardize,
                ..Default::default()
            };
            std::fs::create_dir_all(&out)?;
            let preds = pipeline::stage_lasso_model(&tables, &split, adjusted, &config, &out)?;
            println!(
                "fitted {} imputations -> {:?}",
                tables.len(),
                out.join("models").join(&preds.name)
            );
            Ok(())
        }
        Command::Rf {
            imputed,
            trees,
            tune,
            tune_trees,
            tune_folds,
            mtry,
            adjusted,
            seed,
            dump_model,
            out,
        } => {
            let (tables, split) = load_imputed_tables(&imputed)?;
            let split = split_or_all(&tables, &split);
            let stage = ForestStageConfig {
                trees,
                tune,
                tune_trees,
                tune_folds,
                mtry_fraction: mtry,
                seed,
                ..Default::default()
            };
            std::fs::create_dir_all(&out)?;
            let preds = pipeline::stage_forest_model(&tables, &split, adjusted, &stage, &out)?;
            if dump_model {
                // Refit to serialize; training is seed-deterministic so this
                // reproduces the evaluated forests exactly.
                let model_dir = out.join("models").join(&preds.name);
                let config: cadmet_core::forest::RfConfig = serde_json::from_str(
                    &std::fs::read_to_string(model_dir.join("config.json"))?,
                )?;
                for (m, table) in tables.iter().enumerate() {
                    let (x, _) = pipeline::feature_matrix(table, &split.train, adjusted);
                    let y: Vec<u8> = split.train.iter().map(|&i| table.outcome[i]).collect();
                    let forest = cadmet_core::forest::fit_forest(&x.view(), &y, &config)?;
                    std::fs::write(
                        model_dir.join(format!("forest_imp_{}.json", m + 1)),
                        serde_json::to_string(&forest)?,
                    )?;
                }
            }
            println!(
                "fitted {} forests -> {:?}",
                tables.len(),
                out.join("models").join(&preds.name)
            );
            Ok(())
        }
        Command::Evaluate {
            models,
            labels,
            schema,
            threshold,
            out,
        } => {
            let schema = CohortSchema::from_json_file(&schema)?;
            let label_table = CohortTable::load_csv(&labels, &schema)?;
            let mut predictions = Vec::new();
            for dir in &models {
                let name = dir
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or("model")
                    .to_string();
                let path = dir.join("predictions.csv");
                let (ids, per_imputation) = read_predictions(&path)?;
                if ids != label_table.ids {
                    bail!(
                        "{path:?}: prediction ids do not match the label rows; \
                         pass the same test.csv the models predicted"
                    );
                }
                predictions.push(ModelPredictions {
                    adjusted: name.contains("adjusted") && !name.contains("unadjusted"),
                    name,
                    per_imputation,
                });
            }
            let out_dir = out.parent().map(Path::to_path_buf).unwrap_or_default();
            let reports =
                pipeline::stage_evaluate(&predictions, &label_table.outcome, threshold, &out_dir)?;
            if out.file_name().is_some_and(|n| n != "report.json") {
                std::fs::rename(out_dir.join("report.json"), &out)?;
            }
            print!("{}", cadmet_core::evalx::format_table2(&reports));
            Ok(())
        }
        Command::Run { config, seed, out } => {
            let mut pipeline_config = PipelineConfig::from_toml_file(&config)?;
            if let Some(out) = out {
                pipeline_config.data.out_dir = out;
            }
            if let Some(seed) = seed {
                pipeline_config.split.seed = seed;
                pipeline_config.impute.config.seed = seed;
                pipeline_config.lasso.seed = seed;
                pipeline_config.forest.seed = seed;
                if let Some(synth) = pipeline_config.synth.as_mut() {
                    synth.seed = seed;
                }
            }
            let manifest = run_pipeline(&pipeline_config)?;
            for stage in &manifest.stages {
                println!("{:<10} {:>8} ms  {}", stage.name, stage.millis, stage.status);
            }
            let table2 = pipeline_config.data.out_dir.join("table2.txt");
            if let Ok(text) = std::fs::read_to_string(table2) {
                print!("{text}");
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    #[cfg(feature = "parallel")]
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("warning: thread pool already initialized: {e}");
        }
    }
    #[cfg(not(feature = "parallel"))]
    if cli.threads > 1 {
        eprintln!("warning: built without the parallel feature; --threads ignored");
    }
    if let Err(e) = run_command(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
