//! Thin command-line front end: every subcommand is file-in/file-out glue
//! around the library so pipeline stages can be rerun in isolation.
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure,
//! 4 I/O or format failure.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use sldd::diversity::{loc_k, LocClasses};
use sldd::error::{Result, SlddError};
use sldd::finetune::{finetune, FinetuneConfig, FinetuneData, ToyExtractor};
use sldd::io;
use sldd::localization::{
    localize_feature, Extractor, PatchSchedule, SubprocessExtractor, ToyMapExtractor,
};
use sldd::pipeline::{
    config_from_toml, generate_dataset, read_dataset, run_pipeline, PipelineConfig,
};
use sldd::prox::ProxKind;
use sldd::saga::{fit_path, sparsify, SolverConfig};
use sldd::select::select_features;
use sldd::tensor::{pool_maps, standardize, LabelVector, SparseLinearModel};

#[derive(Parser)]
#[command(
    name = "sldd",
    about = "Sparse low-dimensional decision layers: training, selection, paths, finetuning and interpretability metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML pipeline config; unset fields fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    n_target: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    budget_select: Option<f64>,
    #[arg(long)]
    budget_final: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut config = match &self.config {
            Some(path) => config_from_toml(&std::fs::read_to_string(path)?)?,
            None => PipelineConfig::default(),
        };
        if let Some(dir) = &self.dataset_dir {
            config.dataset_dir = dir.clone();
        }
        if let Some(dir) = &self.out_dir {
            config.out_dir = dir.clone();
        }
        if let Some(seeds) = &self.seeds {
            config.seeds = seeds.clone();
        }
        if let Some(n) = self.n_target {
            config.n_target = n;
        }
        if let Some(beta) = self.beta {
            config.beta = beta;
            config.dense.beta = beta;
            config.finetune.beta = beta;
        }
        if let Some(b) = self.budget_select {
            config.budget_select = b;
        }
        if let Some(b) = self.budget_final {
            config.budget_final = b;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark dataset.
    Gen(ConfigArgs),
    /// Stage 1: dense training with the diversity loss; also emits pooled
    /// and standardized features.
    TrainDense {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Stage 2: gated group feature selection on standardized features.
    Select {
        /// Standardized training features (FMX1 with sidecar).
        #[arg(long)]
        features: PathBuf,
        /// Labels JSON.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        n_target: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 3a: regularization path over (optionally selected) features.
    Path {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// SelectionState JSON restricting the columns.
        #[arg(long)]
        selection: Option<PathBuf>,
        #[arg(long, default_value_t = 0.99)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 3b: pick the budgeted path solution and clip it down.
    Sparsify {
        #[arg(long)]
        path: PathBuf,
        /// Selection JSON used to embed the model back into full feature
        /// space.
        #[arg(long)]
        selection: Option<PathBuf>,
        /// Features file whose sidecar stats map the model to raw space.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, default_value_t = 10.0)]
        budget_select: f64,
        #[arg(long, default_value_t = 5.0)]
        budget_final: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 4: masked finetune of the sparse model (and extractor).
    Finetune {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        /// Extractor base path (without extension) from the dense stage.
        #[arg(long)]
        extractor: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Accuracy, sparsity and loc_k of a model on a maps file.
    Metrics {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Extractor base path applied to the maps first.
        #[arg(long)]
        extractor: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Masking-based localization map for one feature.
    Localize {
        /// Single-example FMP1 input (channels x H x W).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        feature: usize,
        /// Extractor base path (toy extractor files).
        #[arg(long)]
        extractor: Option<PathBuf>,
        /// External extractor command; speaks FMP1 on stdin, FMX1 on
        /// stdout.
        #[arg(long)]
        subprocess: Option<String>,
        /// Feature count reported by the subprocess extractor.
        #[arg(long)]
        subprocess_features: Option<usize>,
        /// Comma-separated patch sizes; defaults to the standard schedule.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage for every seed and write the summary.
    Pipeline {
        #[command(flatten)]
        common: ConfigArgs,
        /// Generate the dataset first when it is missing.
        #[arg(long)]
        gen: bool,
    },
    /// Aggregate one or more pipeline runs into tables and plots.
    Report {
        /// Run directories holding summary.json.
        #[arg(long, value_delimiter = ',', required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen(common) => {
            let config = common.resolve()?;
            generate_dataset(&config)?;
            println!("dataset written to {}", config.dataset_dir.display());
        }
        Command::TrainDense { common, seed } => {
            let config = common.resolve()?;
            let data = read_dataset(&config.dataset_dir)?;
            std::fs::create_dir_all(&config.out_dir)?;
            let features = data.train_maps.num_features();
            let (map_h, map_w) = data.train_maps.map_shape();
            let dense_config = FinetuneConfig {
                beta: config.beta,
                seed,
                freeze_support: false,
                ..config.dense.clone()
            };
            let extractor = config
                .use_extractor
                .then(|| ToyExtractor::identity(features, map_h, map_w));
            let start = SparseLinearModel::zeros(
                data.train_labels.num_classes(),
                features,
                sldd::tensor::ModelMeta::stage("dense-init"),
            );
            let result = finetune(
                FinetuneData::Maps(&data.train_maps),
                &data.train_labels,
                &start,
                &dense_config,
                extractor.as_ref(),
            )?;
            io::write_model(
                &config.out_dir.join("dense_model.json"),
                &result.model.clone().with_stage("dense"),
                None,
            )?;
            if let Some(extr) = &result.extractor {
                io::write_extractor(&config.out_dir.join("dense_extractor"), extr)?;
            }
            let produce = |maps: &sldd::tensor::FeatureMapBatch| match &result.extractor {
                Some(extr) => extr.forward(maps),
                None => Ok(maps.clone()),
            };
            let pooled_train = pool_maps(&produce(&data.train_maps)?);
            let pooled_test = pool_maps(&produce(&data.test_maps)?);
            let std_train = standardize(&pooled_train)?;
            io::write_feature_matrix(&config.out_dir.join("features_train.fmx"), &std_train)?;
            io::write_feature_matrix(&config.out_dir.join("features_test.fmx"), &pooled_test)?;
            let accuracy = result.model.accuracy(&pooled_test, &data.test_labels)?;
            println!(
                "dense model trained; test accuracy {accuracy:.4}; artifacts in {}",
                config.out_dir.display()
            );
        }
        Command::Select {
            features,
            labels,
            n_target,
            seed,
            out,
        } => {
            let feats = io::read_feature_matrix(&features)?;
            let labels: LabelVector = io::read_json(&labels)?;
            let config = SolverConfig {
                alpha: sldd::select::SELECT_ALPHA,
                seed,
                ..SolverConfig::default()
            };
            let state = select_features(&feats, &labels, n_target, &config)?;
            io::write_json(&out, &state)?;
            println!("selected {:?}", state.selected);
        }
        Command::Path {
            features,
            labels,
            selection,
            alpha,
            seed,
            out,
        } => {
            let mut feats = io::read_feature_matrix(&features)?;
            let labels: LabelVector = io::read_json(&labels)?;
            if let Some(path) = selection {
                let state: sldd::select::SelectionState = io::read_json(&path)?;
                feats = feats.select_columns(&state.selected)?;
            }
            let config = SolverConfig {
                alpha,
                seed,
                ..SolverConfig::default()
            };
            let path = fit_path(&feats, &labels, &config, &ProxKind::Elementwise)?;
            io::write_path(&out, &path)?;
            println!(
                "path with {} entries written to {}",
                path.entries.len(),
                out.display()
            );
        }
        Command::Sparsify {
            path,
            selection,
            features,
            budget_select,
            budget_final,
            out,
        } => {
            let reg_path = io::read_path(&path)?;
            let mut model = sparsify(&reg_path, budget_select, budget_final)?;
            if let Some(selection_path) = selection {
                let state: sldd::select::SelectionState = io::read_json(&selection_path)?;
                let features_file = features.as_ref().ok_or_else(|| {
                    SlddError::Config(
                        "--features is required to embed a selected-columns model".into(),
                    )
                })?;
                let feats = io::read_feature_matrix(features_file)?;
                model = model.expand_features(&state.selected, feats.num_features())?;
                if let Some(stats) = feats.norm_stats() {
                    model = model.unnormalize(stats)?;
                }
            } else if let Some(features_file) = &features {
                let feats = io::read_feature_matrix(features_file)?;
                if let Some(stats) = feats.norm_stats() {
                    model = model.unnormalize(stats)?;
                }
            }
            let metrics = model.sparsity_metrics();
            io::write_model(&out, &model.with_stage("sparsified"), None)?;
            println!(
                "sparsified model: n_w {}, n_per_class {:.2}",
                metrics.n_w, metrics.n_per_class
            );
        }
        Command::Finetune {
            common,
            model,
            extractor,
            seed,
        } => {
            let config = common.resolve()?;
            let data = read_dataset(&config.dataset_dir)?;
            std::fs::create_dir_all(&config.out_dir)?;
            let start = io::read_model(&model)?;
            let extractor = extractor.map(|base| io::read_extractor(&base)).transpose()?;
            let finetune_config = FinetuneConfig {
                beta: config.beta,
                seed,
                freeze_support: true,
                ..config.finetune.clone()
            };
            let result = finetune(
                FinetuneData::Maps(&data.train_maps),
                &data.train_labels,
                &start,
                &finetune_config,
                extractor.as_ref(),
            )?;
            io::write_model(
                &config.out_dir.join("finetuned_model.json"),
                &result.model,
                None,
            )?;
            if let Some(extr) = &result.extractor {
                io::write_extractor(&config.out_dir.join("finetuned_extractor"), extr)?;
            }
            let produce = |maps: &sldd::tensor::FeatureMapBatch| match &result.extractor {
                Some(extr) => extr.forward(maps),
                None => Ok(maps.clone()),
            };
            let pooled_test = pool_maps(&produce(&data.test_maps)?);
            let accuracy = result.model.accuracy(&pooled_test, &data.test_labels)?;
            println!(
                "finetuned; test accuracy {accuracy:.4}; artifacts in {}",
                config.out_dir.display()
            );
        }
        Command::Metrics {
            model,
            maps,
            labels,
            extractor,
            k,
            out,
        } => {
            let model = io::read_model(&model)?;
            let mut maps = io::read_feature_maps(&maps)?;
            let labels: LabelVector = io::read_json(&labels)?;
            if let Some(base) = extractor {
                maps = io::read_extractor(&base)?.forward(&maps)?;
            }
            let pooled = pool_maps(&maps);
            let accuracy = model.accuracy(&pooled, &labels)?;
            let report = loc_k(&maps, &model, LocClasses::Predicted, k)?;
            let sparsity = model.sparsity_metrics();
            let document = serde_json::json!({
                "accuracy": accuracy,
                "n_w": sparsity.n_w,
                "n_per_class": sparsity.n_per_class,
                "total_features_used": sparsity.total_features_used,
                "loc_k": report.mean_per_example,
                "loc_k_per_class": report.mean_per_class,
                "k": k,
            });
            match out {
                Some(path) => io::write_json(&path, &document)?,
                None => println!("{}", serde_json::to_string_pretty(&document)?),
            }
        }
        Command::Localize {
            input,
            feature,
            extractor,
            subprocess,
            subprocess_features,
            sizes,
            out,
        } => {
            let batch = io::read_feature_maps(&input)?;
            if batch.num_examples() != 1 {
                return Err(SlddError::Config(
                    "localize expects a single-example FMP1 input".into(),
                ));
            }
            let grid = batch.values().index_axis(ndarray::Axis(0), 0).to_owned();
            let schedule = match sizes {
                Some(list) => PatchSchedule::for_sizes(list),
                None => PatchSchedule::default(),
            };
            let boxed: Box<dyn Extractor> = match (extractor, subprocess) {
                (Some(base), None) => Box::new(ToyMapExtractor {
                    extractor: io::read_extractor(&base)?,
                }),
                (None, Some(command)) => {
                    let mut parts = command.split_whitespace();
                    let program = parts
                        .next()
                        .ok_or_else(|| SlddError::Config("empty subprocess command".into()))?
                        .to_string();
                    Box::new(SubprocessExtractor {
                        program,
                        args: parts.map(str::to_string).collect(),
                        num_features: subprocess_features.ok_or_else(|| {
                            SlddError::Config(
                                "--subprocess-features is required with --subprocess".into(),
                            )
                        })?,
                    })
                }
                _ => {
                    return Err(SlddError::Config(
                        "exactly one of --extractor and --subprocess is required".into(),
                    ))
                }
            };
            let map = localize_feature(boxed.as_ref(), &grid, feature, &schedule)?;
            let (h, w) = map.values.dim();
            let mut tensor = ndarray::Array4::zeros((1, 1, h, w));
            tensor
                .index_axis_mut(ndarray::Axis(0), 0)
                .index_axis_mut(ndarray::Axis(0), 0)
                .assign(&map.values);
            io::write_feature_maps(&out, &sldd::tensor::FeatureMapBatch::new(tensor)?)?;
            io::write_pgm(&out.with_extension("pgm"), &map.values)?;
            println!(
                "localization map ({h}x{w}) written to {} (+ .pgm)",
                out.display()
            );
        }
        Command::Pipeline { common, gen } => {
            let config = common.resolve()?;
            if gen && !config.dataset_dir.join("manifest.json").exists() {
                generate_dataset(&config)?;
            }
            let bundle = run_pipeline(&config)?;
            let ok = bundle
                .summary
                .seeds
                .iter()
                .filter(|r| matches!(r, sldd::pipeline::SeedRecord::Ok { .. }))
                .count();
            println!(
                "pipeline finished: {ok}/{} seeds ok; summary at {}",
                bundle.summary.seeds.len(),
                bundle.out_dir.join("summary.json").display()
            );
            if let Some(acc) = bundle.summary.aggregate.get("final_test_accuracy") {
                println!("final test accuracy: {:.4} +/- {:.4}", acc.mean, acc.std);
            }
        }
        Command::Report { runs, out } => {
            let files = sldd::report::report(&runs, &out)?;
            println!(
                "report written: {}, {}, {}",
                files.per_seed_csv.display(),
                files.aggregate_csv.display(),
                files.summary_json.display()
            );
        }
    }
    Ok(())
}
