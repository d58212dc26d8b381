//! File codecs: the FMX1 feature-matrix and FMP1 feature-map binary
//! formats, CSV matrix import/export, JSON schemas for models, paths and
//! selections, and PGM export for quick map viewing. All floats are stored
//! as little-endian f64, so round-trips are bit-exact.
//!
//! FMX1: magic `FMX1`, u32 N, u32 F, then N·F f64 row-major. A matrix with
//! normalization statistics gets a JSON sidecar next to it (`.meta.json`
//! replaces the extension). FMP1: magic `FMP1`, u32 N, F, H, W, then f64 in
//! (n, l, i, j) order.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Array4};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Result, SlddError};
use crate::saga::{PathEntry, RegularizationPath, SolverConfig};
use crate::tensor::{FeatureMapBatch, FeatureMatrix, ModelMeta, NormStats, SparseLinearModel};

const MATRIX_MAGIC: &[u8; 4] = b"FMX1";
const MAPS_MAGIC: &[u8; 4] = b"FMP1";

fn format_err(path: &Path, reason: impl Into<String>) -> SlddError {
    SlddError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Sidecar path holding a matrix's normalization statistics.
pub fn meta_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

#[derive(Serialize, Deserialize)]
struct MatrixMeta {
    normalized: bool,
    norm_stats: Option<NormStats>,
}

/// Streams the FMX1 body (no sidecar) to any writer, e.g. a subprocess.
pub fn write_feature_matrix_to<W: Write>(out: &mut W, matrix: &FeatureMatrix) -> Result<()> {
    out.write_all(MATRIX_MAGIC)?;
    out.write_u32::<LittleEndian>(matrix.num_examples() as u32)?;
    out.write_u32::<LittleEndian>(matrix.num_features() as u32)?;
    for &v in matrix.values().iter() {
        out.write_f64::<LittleEndian>(v)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads an FMX1 body from any reader; the matrix comes back raw (no
/// normalization metadata travels over a stream).
pub fn read_feature_matrix_from<R: Read>(input: &mut R) -> Result<FeatureMatrix> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MATRIX_MAGIC {
        return Err(SlddError::Format {
            path: "<stream>".into(),
            reason: "bad magic, expected FMX1".into(),
        });
    }
    let n = input.read_u32::<LittleEndian>()? as usize;
    let f = input.read_u32::<LittleEndian>()? as usize;
    let mut values = Vec::with_capacity(n * f);
    for _ in 0..n * f {
        values.push(input.read_f64::<LittleEndian>()?);
    }
    let values = Array2::from_shape_vec((n, f), values).map_err(|e| SlddError::Format {
        path: "<stream>".into(),
        reason: format!("shape: {e}"),
    })?;
    FeatureMatrix::new(values)
}

pub fn write_feature_matrix(path: &Path, matrix: &FeatureMatrix) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_feature_matrix_to(&mut out, matrix)?;
    if matrix.normalized() || matrix.norm_stats().is_some() {
        let meta = MatrixMeta {
            normalized: matrix.normalized(),
            norm_stats: matrix.norm_stats().cloned(),
        };
        write_json(&meta_sidecar_path(path), &meta)?;
    }
    Ok(())
}

pub fn read_feature_matrix(path: &Path) -> Result<FeatureMatrix> {
    let mut input = BufReader::new(File::open(path)?);
    let raw = read_feature_matrix_from(&mut input).map_err(|e| match e {
        SlddError::Format { reason, .. } => format_err(path, reason),
        other => other,
    })?;
    let sidecar = meta_sidecar_path(path);
    if sidecar.exists() {
        let meta: MatrixMeta = read_json(&sidecar)?;
        FeatureMatrix::from_parts(raw.values().clone(), meta.normalized, meta.norm_stats)
    } else {
        Ok(raw)
    }
}

/// Streams the FMP1 body to any writer.
pub fn write_feature_maps_to<W: Write>(out: &mut W, maps: &FeatureMapBatch) -> Result<()> {
    let (n, f, h, w) = maps.values().dim();
    out.write_all(MAPS_MAGIC)?;
    for dim in [n, f, h, w] {
        out.write_u32::<LittleEndian>(dim as u32)?;
    }
    for &v in maps.values().iter() {
        out.write_f64::<LittleEndian>(v)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_feature_maps(path: &Path, maps: &FeatureMapBatch) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_feature_maps_to(&mut out, maps)
}

pub fn read_feature_maps(path: &Path) -> Result<FeatureMapBatch> {
    let mut input = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAPS_MAGIC {
        return Err(format_err(path, "bad magic, expected FMP1"));
    }
    let n = input.read_u32::<LittleEndian>()? as usize;
    let f = input.read_u32::<LittleEndian>()? as usize;
    let h = input.read_u32::<LittleEndian>()? as usize;
    let w = input.read_u32::<LittleEndian>()? as usize;
    let count = n * f * h * w;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(input.read_f64::<LittleEndian>()?);
    }
    let values = Array4::from_shape_vec((n, f, h, w), values)
        .map_err(|e| format_err(path, format!("shape: {e}")))?;
    FeatureMapBatch::new(values)
}

/// CSV import: one header row, then one row of floats per example.
pub fn read_csv_matrix(path: &Path) -> Result<FeatureMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| format_err(path, e.to_string()))?;
    let width = reader
        .headers()
        .map_err(|e| format_err(path, e.to_string()))?
        .len();
    let mut values = Vec::new();
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| format_err(path, e.to_string()))?;
        if record.len() != width {
            return Err(format_err(
                path,
                format!("row {rows} has {} fields, expected {width}", record.len()),
            ));
        }
        for field in record.iter() {
            let value: f64 = field
                .trim()
                .parse()
                .map_err(|_| format_err(path, format!("bad float {field:?} in row {rows}")))?;
            values.push(value);
        }
        rows += 1;
    }
    let values = Array2::from_shape_vec((rows, width), values)
        .map_err(|e| format_err(path, format!("shape: {e}")))?;
    FeatureMatrix::new(values)
}

pub fn write_csv_matrix(path: &Path, matrix: &FeatureMatrix) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header: Vec<String> = (0..matrix.num_features())
        .map(|l| format!("feat_{l}"))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for row in matrix.values().rows() {
        let fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(file, value)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(file)?)
}

/// Standalone model document; the same fields as a path entry plus the
/// shape and provenance needed to reconstruct the model exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelJson {
    pub lambda: Option<f64>,
    pub objective: Option<f64>,
    pub n_w: usize,
    pub n_per_class: f64,
    pub weights: Vec<(usize, usize, f64)>,
    pub bias: Vec<f64>,
    pub num_classes: usize,
    pub num_features: usize,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub stage: String,
}

impl ModelJson {
    pub fn from_model(model: &SparseLinearModel, objective: Option<f64>) -> Self {
        let metrics = model.sparsity_metrics();
        ModelJson {
            lambda: model.meta().lambda,
            objective,
            n_w: metrics.n_w,
            n_per_class: metrics.n_per_class,
            weights: model.triplets(),
            bias: model.bias().to_vec(),
            num_classes: model.num_classes(),
            num_features: model.num_features(),
            alpha: model.meta().alpha,
            seed: model.meta().seed,
            stage: model.meta().stage.clone(),
        }
    }

    pub fn into_model(self) -> Result<SparseLinearModel> {
        let mut weights = Array2::zeros((self.num_classes, self.num_features));
        for &(class, feature, value) in &self.weights {
            if class >= self.num_classes || feature >= self.num_features {
                return Err(SlddError::Config(format!(
                    "weight entry ({class}, {feature}) out of range"
                )));
            }
            weights[(class, feature)] = value;
        }
        let meta = ModelMeta {
            lambda: self.lambda,
            alpha: self.alpha,
            seed: self.seed,
            stage: self.stage,
        };
        SparseLinearModel::from_dense(weights, Array1::from_vec(self.bias), meta)
    }
}

pub fn write_model(path: &Path, model: &SparseLinearModel, objective: Option<f64>) -> Result<()> {
    write_json(path, &ModelJson::from_model(model, objective))
}

pub fn read_model(path: &Path) -> Result<SparseLinearModel> {
    read_json::<ModelJson>(path)?.into_model()
}

/// Path-entry document, exactly the path serialization schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathEntryJson {
    pub lambda: f64,
    pub objective: f64,
    pub n_w: usize,
    pub n_per_class: f64,
    pub weights: Vec<(usize, usize, f64)>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathJson {
    pub config: SolverConfig,
    pub num_classes: usize,
    pub num_features: usize,
    pub entries: Vec<PathEntryJson>,
}

impl PathJson {
    pub fn from_path(path: &RegularizationPath) -> Self {
        let (num_classes, num_features) = path
            .entries
            .first()
            .map(|e| (e.model.num_classes(), e.model.num_features()))
            .unwrap_or((0, 0));
        PathJson {
            config: path.config.clone(),
            num_classes,
            num_features,
            entries: path
                .entries
                .iter()
                .map(|entry| PathEntryJson {
                    lambda: entry.lambda,
                    objective: entry.objective,
                    n_w: entry.metrics.n_w,
                    n_per_class: entry.metrics.n_per_class,
                    weights: entry.model.triplets(),
                    bias: entry.model.bias().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_path(self) -> Result<RegularizationPath> {
        let mut entries = Vec::with_capacity(self.entries.len());
        for entry in self.entries {
            let mut weights = Array2::zeros((self.num_classes, self.num_features));
            for &(class, feature, value) in &entry.weights {
                weights[(class, feature)] = value;
            }
            let meta = ModelMeta {
                lambda: Some(entry.lambda),
                alpha: Some(self.config.alpha),
                seed: Some(self.config.seed),
                stage: "path".into(),
            };
            let model =
                SparseLinearModel::from_dense(weights, Array1::from_vec(entry.bias), meta)?;
            entries.push(PathEntry {
                lambda: entry.lambda,
                metrics: model.sparsity_metrics(),
                objective: entry.objective,
                model,
            });
        }
        RegularizationPath::new(self.config, entries)
    }
}

pub fn write_path(path: &Path, reg_path: &RegularizationPath) -> Result<()> {
    write_json(path, &PathJson::from_path(reg_path))
}

pub fn read_path(path: &Path) -> Result<RegularizationPath> {
    read_json::<PathJson>(path)?.into_path()
}

#[derive(Serialize, Deserialize)]
struct ExtractorMeta {
    num_features: usize,
    map_h: usize,
    map_w: usize,
}

/// Persists a toy extractor as `<base>.fmx` (blocks stacked row-wise) plus
/// `<base>.json` (dimensions).
pub fn write_extractor(base: &Path, extractor: &crate::finetune::ToyExtractor) -> Result<()> {
    let (f, rows, cols) = extractor.weights().dim();
    let stacked = extractor
        .weights()
        .to_shape((f * rows, cols))
        .expect("contiguous weights")
        .to_owned();
    let matrix = FeatureMatrix::new(stacked)?;
    write_feature_matrix(&base.with_extension("fmx"), &matrix)?;
    let (map_h, map_w) = extractor.map_shape();
    write_json(
        &base.with_extension("json"),
        &ExtractorMeta {
            num_features: f,
            map_h,
            map_w,
        },
    )
}

pub fn read_extractor(base: &Path) -> Result<crate::finetune::ToyExtractor> {
    let meta: ExtractorMeta = read_json(&base.with_extension("json"))?;
    let matrix = read_feature_matrix(&base.with_extension("fmx"))?;
    let cells = meta.map_h * meta.map_w;
    let blocks = matrix
        .values()
        .to_shape((meta.num_features, cells, cells))
        .map_err(|e| SlddError::Format {
            path: base.display().to_string(),
            reason: format!("extractor shape: {e}"),
        })?
        .to_owned();
    crate::finetune::ToyExtractor::from_weights(blocks, meta.map_h, meta.map_w)
}

/// Grayscale P5 export, max-scaled to 255. An all-zero map stays black.
pub fn write_pgm(path: &Path, values: &Array2<f64>) -> Result<()> {
    let (h, w) = values.dim();
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    for &v in values.iter() {
        let scaled = if max > 0.0 {
            (v / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        };
        out.write_all(&[scaled])?;
    }
    out.flush()?;
    Ok(())
}
