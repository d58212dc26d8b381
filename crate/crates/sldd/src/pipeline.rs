//! End-to-end staged pipeline: dense training with the diversity loss,
//! gated feature selection, regularization path plus budgeted
//! sparsification, and masked finetuning — run per seed over a shared
//! dataset, with every stage artifact persisted so any stage can be rerun
//! in isolation. Seeds are independent jobs; a failing seed is recorded in
//! the summary while the others continue.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::alignment::{alignment_report, alignment_scores, AttributeTable};
use crate::diversity::{loc_k, LocClasses};
use crate::error::{Result, SlddError};
use crate::finetune::{finetune, EpochStats, FinetuneConfig, FinetuneData, ToyExtractor};
use crate::io;
use crate::prox::ProxKind;
use crate::saga::{fit_path, sparsify, LambdaSchedule, SolverConfig};
use crate::select::{select_features, SELECT_ALPHA};
use crate::synth::{generate_synthetic, SyntheticDataset, SyntheticSpec};
use crate::tensor::{pool_maps, standardize, FeatureMapBatch, LabelVector, SparseLinearModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub synth: SyntheticSpec,
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Number of features the selection stage keeps.
    pub n_target: usize,
    /// Path entry is chosen with n_per_class at most this.
    pub budget_select: f64,
    /// Entries are clipped until n_per_class reaches this.
    pub budget_final: f64,
    /// Diversity weight used by the dense and finetune stages.
    pub beta: f64,
    pub loc_k: usize,
    /// Train the toy extractor so the maps can adapt; without it both
    /// training stages are head-only.
    pub use_extractor: bool,
    /// Compute attribute alignment on the finetuned features.
    pub run_alignment: bool,
    pub dense: FinetuneConfig,
    pub selection: SolverConfig,
    pub solver: SolverConfig,
    pub finetune: FinetuneConfig,
    /// Worker cap; the SLDD_THREADS environment variable wins over this.
    pub threads: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            synth: SyntheticSpec::standard(0),
            dataset_dir: PathBuf::from("dataset"),
            out_dir: PathBuf::from("out"),
            seeds: vec![1, 2, 3, 4, 5],
            n_target: 20,
            budget_select: 10.0,
            budget_final: 5.0,
            beta: 0.196,
            loc_k: 5,
            use_extractor: true,
            run_alignment: true,
            dense: FinetuneConfig {
                beta: 0.196,
                epochs: 20,
                lr: 0.02,
                momentum: 0.9,
                feature_dropout: 0.2,
                freeze_support: false,
                ..FinetuneConfig::default()
            },
            selection: SolverConfig {
                alpha: SELECT_ALPHA,
                lambda_schedule: LambdaSchedule::Geometric {
                    k_steps: 15,
                    eps_ratio: 1e-3,
                },
                max_epochs: 40,
                ..SolverConfig::default()
            },
            solver: SolverConfig {
                max_epochs: 80,
                ..SolverConfig::default()
            },
            finetune: FinetuneConfig::default(),
            threads: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.selection.validate()?;
        self.solver.validate()?;
        self.dense.validate()?;
        self.finetune.validate()?;
        if self.seeds.is_empty() {
            return Err(SlddError::Config("at least one seed is required".into()));
        }
        if self.n_target == 0 || self.n_target > self.synth.features {
            return Err(SlddError::Config(format!(
                "n_target must be in 1..={}, got {}",
                self.synth.features, self.n_target
            )));
        }
        if self.budget_final > self.budget_select {
            return Err(SlddError::Config(
                "budget_final cannot exceed budget_select".into(),
            ));
        }
        if self.loc_k == 0 {
            return Err(SlddError::Config("loc_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Loads a pipeline config from TOML, filling unspecified fields from the
/// defaults.
pub fn config_from_toml(text: &str) -> Result<PipelineConfig> {
    let value: toml::Value = text
        .parse()
        .map_err(|e| SlddError::Config(format!("config parse error: {e}")))?;
    let defaults = toml::Value::try_from(PipelineConfig::default())
        .map_err(|e| SlddError::Config(format!("defaults: {e}")))?;
    let merged = merge_toml(defaults, value);
    merged
        .try_into()
        .map_err(|e| SlddError::Config(format!("config: {e}")))
}

fn merge_toml(base: toml::Value, overlay: toml::Value) -> toml::Value {
    match (base, overlay) {
        (toml::Value::Table(mut base), toml::Value::Table(overlay)) => {
            for (key, value) in overlay {
                let merged = match base.remove(&key) {
                    Some(existing) => merge_toml(existing, value),
                    None => value,
                };
                base.insert(key, merged);
            }
            toml::Value::Table(base)
        }
        (_, overlay) => overlay,
    }
}

/// Dataset manifest persisted next to the binary tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: SyntheticSpec,
    pub class_signal_features: Vec<Vec<usize>>,
    pub ground_truth_support: Vec<(usize, usize)>,
    pub bump_locations: Vec<(usize, usize, usize, usize)>,
    pub attribute_features: Vec<usize>,
    pub attribute_names: Vec<String>,
}

pub fn write_dataset(dir: &Path, data: &SyntheticDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    io::write_feature_maps(&dir.join("train_maps.fmp"), &data.train_maps)?;
    io::write_feature_maps(&dir.join("test_maps.fmp"), &data.test_maps)?;
    io::write_json(&dir.join("train_labels.json"), &data.train_labels)?;
    io::write_json(&dir.join("test_labels.json"), &data.test_labels)?;
    let attribute_names = data
        .attributes
        .as_ref()
        .map(|t| t.names().to_vec())
        .unwrap_or_default();
    if let Some(attrs) = &data.attributes {
        attrs.to_csv(&dir.join("attributes.csv"))?;
    }
    let manifest = DatasetManifest {
        spec: data.spec.clone(),
        class_signal_features: data.class_signal_features.clone(),
        ground_truth_support: data.ground_truth_support.iter().copied().collect(),
        bump_locations: data.bump_locations.clone(),
        attribute_features: data.attribute_features.clone(),
        attribute_names,
    };
    io::write_json(&dir.join("manifest.json"), &manifest)
}

pub fn read_dataset(dir: &Path) -> Result<SyntheticDataset> {
    let manifest: DatasetManifest = io::read_json(&dir.join("manifest.json"))?;
    let train_maps = io::read_feature_maps(&dir.join("train_maps.fmp"))?;
    let test_maps = io::read_feature_maps(&dir.join("test_maps.fmp"))?;
    let train_labels: LabelVector = io::read_json(&dir.join("train_labels.json"))?;
    let test_labels: LabelVector = io::read_json(&dir.join("test_labels.json"))?;
    let attributes_path = dir.join("attributes.csv");
    let attributes = if attributes_path.exists() {
        Some(AttributeTable::from_csv(
            &attributes_path,
            train_labels.len(),
            manifest.attribute_names.clone(),
        )?)
    } else {
        None
    };
    Ok(SyntheticDataset {
        spec: manifest.spec,
        train_maps,
        train_labels,
        test_maps,
        test_labels,
        class_signal_features: manifest.class_signal_features,
        ground_truth_support: manifest.ground_truth_support.into_iter().collect(),
        bump_locations: manifest.bump_locations,
        attributes,
        attribute_features: manifest.attribute_features,
    })
}

/// Generates the dataset described by the config and writes it to the
/// configured dataset directory.
pub fn generate_dataset(config: &PipelineConfig) -> Result<SyntheticDataset> {
    let data = generate_synthetic(&config.synth)?;
    write_dataset(&config.dataset_dir, &data)?;
    Ok(data)
}

/// Per-seed result metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub dense_test_accuracy: f64,
    pub dense_loc_k: Option<f64>,
    pub sparse_test_accuracy: f64,
    pub final_test_accuracy: f64,
    pub final_loc_k: Option<f64>,
    pub final_loc_k_per_class: Option<f64>,
    pub n_w: usize,
    pub n_per_class: f64,
    pub total_features_used: usize,
    pub selected_features: Vec<usize>,
    pub accuracy_ratio_vs_dense: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SeedRecord {
    Ok { metrics: SeedMetrics },
    Failed { seed: u64, error: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let count = values.len();
    if count == 0 {
        return MeanStd {
            mean: f64::NAN,
            std: 0.0,
            count,
        };
    }
    let mean = values.iter().sum::<f64>() / count as f64;
    let std = if count > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1) as f64).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std, count }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub config: PipelineConfig,
    pub seeds: Vec<SeedRecord>,
    /// mean ± std over the successful seeds, keyed by metric name.
    pub aggregate: BTreeMap<String, MeanStd>,
}

#[derive(Debug, Clone)]
pub struct RunBundle {
    pub out_dir: PathBuf,
    pub summary: PipelineSummary,
}

#[derive(Serialize)]
struct RunMeta {
    started_unix_secs: u64,
    duration_secs: f64,
}

fn write_curves(path: &Path, curves: &[EpochStats]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,ce,l_div,objective,accuracy")?;
    for row in curves {
        writeln!(
            out,
            "{},{},{},{},{}",
            row.epoch, row.ce, row.l_div, row.objective, row.accuracy
        )?;
    }
    out.flush()?;
    Ok(())
}

fn stage_seed(seed: u64, stage: u64) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(stage)
}

/// Runs every stage for one seed, persisting artifacts under `seed_dir`.
fn run_seed(
    config: &PipelineConfig,
    data: &SyntheticDataset,
    seed: u64,
    seed_dir: &Path,
) -> Result<SeedMetrics> {
    std::fs::create_dir_all(seed_dir)?;
    let classes = data.train_labels.num_classes();
    let features = data.train_maps.num_features();
    let (map_h, map_w) = data.train_maps.map_shape();

    // stage 1: dense training with the diversity loss
    let dense_config = FinetuneConfig {
        beta: config.beta,
        seed: stage_seed(seed, 1),
        freeze_support: false,
        ..config.dense.clone()
    };
    let extractor0 = config
        .use_extractor
        .then(|| ToyExtractor::identity(features, map_h, map_w));
    let dense_start = SparseLinearModel::zeros(classes, features, crate::tensor::ModelMeta::stage("dense-init"));
    let dense = finetune(
        FinetuneData::Maps(&data.train_maps),
        &data.train_labels,
        &dense_start,
        &dense_config,
        extractor0.as_ref(),
    )?;
    let dense_model = dense.model.clone().with_stage("dense");
    io::write_model(&seed_dir.join("dense_model.json"), &dense_model, None)?;
    write_curves(&seed_dir.join("dense_curves.csv"), &dense.curves)?;
    if let Some(extr) = &dense.extractor {
        io::write_extractor(&seed_dir.join("dense_extractor"), extr)?;
    }

    let forward = |maps: &FeatureMapBatch| -> Result<FeatureMapBatch> {
        match &dense.extractor {
            Some(extr) => extr.forward(maps),
            None => Ok(maps.clone()),
        }
    };
    let train_maps_dense = forward(&data.train_maps)?;
    let test_maps_dense = forward(&data.test_maps)?;
    let pooled_train = pool_maps(&train_maps_dense);
    let pooled_test = pool_maps(&test_maps_dense);
    let dense_test_accuracy = dense_model.accuracy(&pooled_test, &data.test_labels)?;
    let dense_loc = loc_k(
        &test_maps_dense,
        &dense_model,
        LocClasses::Predicted,
        config.loc_k,
    )?;

    // stage 2: standardized features and gated selection
    let std_train = standardize(&pooled_train)?;
    let stats = std_train.norm_stats().expect("standardize records stats").clone();
    io::write_feature_matrix(&seed_dir.join("features_train.fmx"), &std_train)?;
    io::write_feature_matrix(&seed_dir.join("features_test.fmx"), &pooled_test)?;
    let selection_config = SolverConfig {
        seed: stage_seed(seed, 2),
        ..config.selection.clone()
    };
    let selection = select_features(
        &std_train,
        &data.train_labels,
        config.n_target,
        &selection_config,
    )?;
    io::write_json(&seed_dir.join("selection.json"), &selection)?;

    // stage 3: regularization path on the selected columns, then sparsify
    let restricted = std_train.select_columns(&selection.selected)?;
    let solver_config = SolverConfig {
        seed: stage_seed(seed, 3),
        ..config.solver.clone()
    };
    let path = fit_path(
        &restricted,
        &data.train_labels,
        &solver_config,
        &ProxKind::Elementwise,
    )?;
    io::write_path(&seed_dir.join("path.json"), &path)?;
    let sparse_restricted = sparsify(&path, config.budget_select, config.budget_final)?;
    let sparse_std = sparse_restricted.expand_features(&selection.selected, features)?;
    let sparse_raw = sparse_std.unnormalize(&stats)?.with_stage("sparsified");
    io::write_model(&seed_dir.join("sparse_model.json"), &sparse_raw, None)?;
    let sparse_test_accuracy = sparse_raw.accuracy(&pooled_test, &data.test_labels)?;

    // stage 4: masked finetune of head and extractor
    let finetune_config = FinetuneConfig {
        beta: config.beta,
        seed: stage_seed(seed, 4),
        freeze_support: true,
        ..config.finetune.clone()
    };
    let tuned = finetune(
        FinetuneData::Maps(&data.train_maps),
        &data.train_labels,
        &sparse_raw,
        &finetune_config,
        dense.extractor.as_ref(),
    )?;
    io::write_model(&seed_dir.join("finetuned_model.json"), &tuned.model, None)?;
    write_curves(&seed_dir.join("finetune_curves.csv"), &tuned.curves)?;
    if let Some(extr) = &tuned.extractor {
        io::write_extractor(&seed_dir.join("finetuned_extractor"), extr)?;
    }

    let forward_final = |maps: &FeatureMapBatch| -> Result<FeatureMapBatch> {
        match &tuned.extractor {
            Some(extr) => extr.forward(maps),
            None => Ok(maps.clone()),
        }
    };
    let test_maps_final = forward_final(&data.test_maps)?;
    let pooled_test_final = pool_maps(&test_maps_final);
    let final_test_accuracy = tuned.model.accuracy(&pooled_test_final, &data.test_labels)?;
    let final_loc = loc_k(
        &test_maps_final,
        &tuned.model,
        LocClasses::Predicted,
        config.loc_k,
    )?;
    io::write_json(&seed_dir.join("loc_report.json"), &final_loc)?;

    if config.run_alignment {
        if let Some(attrs) = &data.attributes {
            let train_maps_final = forward_final(&data.train_maps)?;
            let pooled_train_final = pool_maps(&train_maps_final);
            let scores = alignment_scores(&pooled_train_final, attrs)?;
            io::write_json(&seed_dir.join("alignment_scores.json"), &scores)?;
            let report = alignment_report(&scores, 0.2);
            io::write_json(&seed_dir.join("alignment_report.json"), &report)?;
            crate::alignment::report_to_csv(&report, &seed_dir.join("alignment_report.csv"))?;
        }
    }

    let sparsity = tuned.model.sparsity_metrics();
    let metrics = SeedMetrics {
        seed,
        dense_test_accuracy,
        dense_loc_k: dense_loc.mean_per_example,
        sparse_test_accuracy,
        final_test_accuracy,
        final_loc_k: final_loc.mean_per_example,
        final_loc_k_per_class: final_loc.mean_per_class,
        n_w: sparsity.n_w,
        n_per_class: sparsity.n_per_class,
        total_features_used: sparsity.total_features_used,
        selected_features: selection.selected.clone(),
        accuracy_ratio_vs_dense: if dense_test_accuracy > 0.0 {
            final_test_accuracy / dense_test_accuracy
        } else {
            f64::NAN
        },
    };
    io::write_json(&seed_dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

fn aggregate_metrics(records: &[SeedRecord]) -> BTreeMap<String, MeanStd> {
    let ok: Vec<&SeedMetrics> = records
        .iter()
        .filter_map(|r| match r {
            SeedRecord::Ok { metrics } => Some(metrics),
            SeedRecord::Failed { .. } => None,
        })
        .collect();
    let mut aggregate = BTreeMap::new();
    let mut put = |name: &str, values: Vec<f64>| {
        if !values.is_empty() {
            aggregate.insert(name.to_string(), mean_std(&values));
        }
    };
    put(
        "dense_test_accuracy",
        ok.iter().map(|m| m.dense_test_accuracy).collect(),
    );
    put(
        "sparse_test_accuracy",
        ok.iter().map(|m| m.sparse_test_accuracy).collect(),
    );
    put(
        "final_test_accuracy",
        ok.iter().map(|m| m.final_test_accuracy).collect(),
    );
    put(
        "accuracy_ratio_vs_dense",
        ok.iter().map(|m| m.accuracy_ratio_vs_dense).collect(),
    );
    put(
        "dense_loc_k",
        ok.iter().filter_map(|m| m.dense_loc_k).collect(),
    );
    put(
        "final_loc_k",
        ok.iter().filter_map(|m| m.final_loc_k).collect(),
    );
    put("n_w", ok.iter().map(|m| m.n_w as f64).collect());
    put("n_per_class", ok.iter().map(|m| m.n_per_class).collect());
    put(
        "total_features_used",
        ok.iter().map(|m| m.total_features_used as f64).collect(),
    );
    aggregate
}

fn worker_count(config: &PipelineConfig) -> Option<usize> {
    std::env::var("SLDD_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .or(config.threads)
}

/// Runs the whole pipeline for every configured seed. The dataset must
/// already exist at `config.dataset_dir` (see [`generate_dataset`]).
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunBundle> {
    config.validate()?;
    let started = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let clock = std::time::Instant::now();

    let data = read_dataset(&config.dataset_dir)?;
    std::fs::create_dir_all(&config.out_dir)?;

    let run_all = || -> Vec<SeedRecord> {
        config
            .seeds
            .par_iter()
            .map(|&seed| {
                let seed_dir = config.out_dir.join(format!("seed_{seed}"));
                match run_seed(config, &data, seed, &seed_dir) {
                    Ok(metrics) => SeedRecord::Ok { metrics },
                    Err(err) => SeedRecord::Failed {
                        seed,
                        error: err.to_string(),
                    },
                }
            })
            .collect()
    };
    let mut records = match worker_count(config) {
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| SlddError::Config(format!("thread pool: {e}")))?
            .install(run_all),
        _ => run_all(),
    };
    records.sort_by_key(|r| match r {
        SeedRecord::Ok { metrics } => metrics.seed,
        SeedRecord::Failed { seed, .. } => *seed,
    });

    let summary = PipelineSummary {
        config: config.clone(),
        aggregate: aggregate_metrics(&records),
        seeds: records,
    };
    io::write_json(&config.out_dir.join("summary.json"), &summary)?;
    io::write_json(
        &config.out_dir.join("run_meta.json"),
        &RunMeta {
            started_unix_secs: started,
            duration_secs: clock.elapsed().as_secs_f64(),
        },
    )?;
    Ok(RunBundle {
        out_dir: config.out_dir.clone(),
        summary,
    })
}
