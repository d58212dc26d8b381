//! Core data containers: pooled feature matrices, spatial feature map
//! batches, labels, logits, and the sparse linear decision layer shared by
//! every other module. All numerics are f64 and all types are immutable
//! after construction, so they can be read concurrently without locks.

use ndarray::{Array1, Array2, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{Result, SlddError};

/// Raw columns with population std below this are treated as constant.
pub const CONSTANT_COLUMN_TOL: f64 = 1e-12;

/// Per-feature standardization statistics recorded by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Population (1/N) standard deviation of the raw column.
    pub std: Vec<f64>,
    /// Indices of columns whose raw std was below [`CONSTANT_COLUMN_TOL`];
    /// those columns are mapped to zero instead of scaled.
    pub constant: Vec<usize>,
}

impl NormStats {
    pub fn is_constant(&self, feature: usize) -> bool {
        self.constant.binary_search(&feature).is_ok()
    }
}

/// N×F matrix of pooled feature activations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Array2<f64>,
    normalized: bool,
    norm_stats: Option<NormStats>,
}

impl FeatureMatrix {
    /// Wraps a raw (unstandardized) value matrix, rejecting non-finite entries.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        check_finite_2d(&values, "feature matrix")?;
        Ok(FeatureMatrix {
            values,
            normalized: false,
            norm_stats: None,
        })
    }

    /// Reassembles a matrix from parts, e.g. when reading from disk.
    /// The caller asserts that `normalized` and `norm_stats` describe `values`.
    pub fn from_parts(
        values: Array2<f64>,
        normalized: bool,
        norm_stats: Option<NormStats>,
    ) -> Result<Self> {
        check_finite_2d(&values, "feature matrix")?;
        if let Some(stats) = &norm_stats {
            if stats.mean.len() != values.ncols() || stats.std.len() != values.ncols() {
                return Err(SlddError::DimensionMismatch {
                    context: "norm_stats".into(),
                    expected: format!("{} features", values.ncols()),
                    got: format!("{} means, {} stds", stats.mean.len(), stats.std.len()),
                });
            }
        }
        Ok(FeatureMatrix {
            values,
            normalized,
            norm_stats,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn num_examples(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.values.ncols()
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm_stats(&self) -> Option<&NormStats> {
        self.norm_stats.as_ref()
    }

    /// Restricts the matrix to the given feature columns, in the given order.
    pub fn select_columns(&self, features: &[usize]) -> Result<FeatureMatrix> {
        for &l in features {
            if l >= self.num_features() {
                return Err(SlddError::Config(format!(
                    "feature index {l} out of range for {} features",
                    self.num_features()
                )));
            }
        }
        let values = self.values.select(Axis(1), features);
        let norm_stats = self.norm_stats.as_ref().map(|stats| NormStats {
            mean: features.iter().map(|&l| stats.mean[l]).collect(),
            std: features.iter().map(|&l| stats.std[l]).collect(),
            constant: features
                .iter()
                .enumerate()
                .filter(|(_, &l)| stats.is_constant(l))
                .map(|(new, _)| new)
                .collect(),
        });
        Ok(FeatureMatrix {
            values,
            normalized: self.normalized,
            norm_stats,
        })
    }

    /// Applies previously recorded statistics to raw data. Constant columns
    /// are mapped to zero, matching [`standardize`].
    pub fn apply_stats(&self, stats: &NormStats) -> Result<FeatureMatrix> {
        if stats.mean.len() != self.num_features() {
            return Err(SlddError::DimensionMismatch {
                context: "apply_stats".into(),
                expected: format!("{} features", self.num_features()),
                got: format!("{} means", stats.mean.len()),
            });
        }
        let mut values = self.values.clone();
        for (l, mut col) in values.axis_iter_mut(Axis(1)).enumerate() {
            if stats.is_constant(l) {
                col.fill(0.0);
            } else {
                let (mean, std) = (stats.mean[l], stats.std[l]);
                col.mapv_inplace(|x| (x - mean) / std);
            }
        }
        Ok(FeatureMatrix {
            values,
            normalized: true,
            norm_stats: Some(stats.clone()),
        })
    }
}

/// Column-standardizes a raw matrix to zero mean and unit population std,
/// recording the statistics. Columns with raw std below
/// [`CONSTANT_COLUMN_TOL`] are set to zero and flagged constant.
pub fn standardize(raw: &FeatureMatrix) -> Result<FeatureMatrix> {
    if raw.normalized {
        return Err(SlddError::Config(
            "standardize expects an unnormalized matrix".into(),
        ));
    }
    let n = raw.num_examples() as f64;
    let mut values = raw.values.clone();
    let mut mean = Vec::with_capacity(raw.num_features());
    let mut std = Vec::with_capacity(raw.num_features());
    let mut constant = Vec::new();
    for (l, mut col) in values.axis_iter_mut(Axis(1)).enumerate() {
        let mu = col.sum() / n;
        let var = col.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / n;
        let sigma = var.sqrt();
        mean.push(mu);
        std.push(sigma);
        if sigma < CONSTANT_COLUMN_TOL {
            constant.push(l);
            col.fill(0.0);
        } else {
            col.mapv_inplace(|x| (x - mu) / sigma);
        }
    }
    Ok(FeatureMatrix {
        values,
        normalized: true,
        norm_stats: Some(NormStats {
            mean,
            std,
            constant,
        }),
    })
}

/// N×F×H×W batch of spatial feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapBatch {
    values: Array4<f64>,
}

impl FeatureMapBatch {
    pub fn new(values: Array4<f64>) -> Result<Self> {
        let (_, _, h, w) = values.dim();
        if h < 1 || w < 1 {
            return Err(SlddError::Config(format!(
                "feature maps need spatial extent, got {h}x{w}"
            )));
        }
        if let Some((index, _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(SlddError::NonFinite {
                what: "feature map batch".into(),
                index: vec![index.0, index.1, index.2, index.3],
            });
        }
        Ok(FeatureMapBatch { values })
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.values
    }

    pub fn num_examples(&self) -> usize {
        self.values.dim().0
    }

    pub fn num_features(&self) -> usize {
        self.values.dim().1
    }

    /// (H_m, W_m) spatial extent.
    pub fn map_shape(&self) -> (usize, usize) {
        let (_, _, h, w) = self.values.dim();
        (h, w)
    }
}

/// Average-pools each map over its spatial dimensions. The result is raw
/// (unnormalized): entry (n, l) is the mean over the H×W cells of map l.
pub fn pool_maps(maps: &FeatureMapBatch) -> FeatureMatrix {
    let (n, f, h, w) = maps.values.dim();
    let cells = (h * w) as f64;
    let mut pooled = Array2::zeros((n, f));
    for i in 0..n {
        for l in 0..f {
            pooled[(i, l)] = maps.values.index_axis(Axis(0), i).index_axis(Axis(0), l).sum() / cells;
        }
    }
    FeatureMatrix {
        values: pooled,
        normalized: false,
        norm_stats: None,
    }
}

/// Class labels for a batch, 0-based, with the class count C.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVector {
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(SlddError::Config(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if let Some((i, &bad)) = labels.iter().enumerate().find(|(_, &c)| c >= num_classes) {
            return Err(SlddError::Config(format!(
                "label {bad} at index {i} out of range for {num_classes} classes"
            )));
        }
        Ok(LabelVector {
            labels,
            num_classes,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Empirical class frequencies (counts / N).
    pub fn priors(&self) -> Array1<f64> {
        let mut counts = Array1::zeros(self.num_classes);
        for &c in &self.labels {
            counts[c] += 1.0;
        }
        counts / self.labels.len() as f64
    }
}

/// N×C pre-softmax outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    values: Array2<f64>,
}

impl Logits {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        check_finite_2d(&values, "logits")?;
        Ok(Logits { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Predicted class per row; ties resolve to the lowest class index.
    pub fn argmax(&self) -> Vec<usize> {
        self.values
            .rows()
            .into_iter()
            .map(|row| argmax_row(row.as_slice().expect("logits are contiguous")))
            .collect()
    }
}

pub(crate) fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Provenance carried on a model: which penalty produced it and at which
/// pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelMeta {
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
    pub stage: String,
}

impl ModelMeta {
    pub fn stage(stage: &str) -> Self {
        ModelMeta {
            stage: stage.to_string(),
            ..ModelMeta::default()
        }
    }
}

/// Sparsity accounting for a decision layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityMetrics {
    /// Number of nonzero weight entries.
    pub n_w: usize,
    /// n_w divided by the number of classes (real-valued).
    pub n_per_class: f64,
    /// Number of feature columns with at least one nonzero entry.
    pub total_features_used: usize,
}

/// The sparse linear decision layer: dense C×F weights plus an explicit
/// support set that always equals the set of nonzero entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLinearModel {
    weights: Array2<f64>,
    bias: Array1<f64>,
    support: BTreeSet<(usize, usize)>,
    meta: ModelMeta,
}

impl SparseLinearModel {
    /// Builds a model from dense weights; the support is derived as the
    /// exact set of nonzero entries.
    pub fn from_dense(weights: Array2<f64>, bias: Array1<f64>, meta: ModelMeta) -> Result<Self> {
        check_finite_2d(&weights, "model weights")?;
        if let Some((i, _)) = bias.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(SlddError::NonFinite {
                what: "model bias".into(),
                index: vec![i],
            });
        }
        if bias.len() != weights.nrows() {
            return Err(SlddError::DimensionMismatch {
                context: "model bias".into(),
                expected: format!("{} classes", weights.nrows()),
                got: format!("{}", bias.len()),
            });
        }
        let support = weights
            .indexed_iter()
            .filter(|(_, &v)| v != 0.0)
            .map(|((c, l), _)| (c, l))
            .collect();
        Ok(SparseLinearModel {
            weights,
            bias,
            support,
            meta,
        })
    }

    pub fn zeros(num_classes: usize, num_features: usize, meta: ModelMeta) -> Self {
        SparseLinearModel {
            weights: Array2::zeros((num_classes, num_features)),
            bias: Array1::zeros(num_classes),
            support: BTreeSet::new(),
            meta,
        }
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn support(&self) -> &BTreeSet<(usize, usize)> {
        &self.support
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.weights.ncols()
    }

    /// Nonzero entries as (class, feature, value), ordered by (class, feature).
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        self.support
            .iter()
            .map(|&(c, l)| (c, l, self.weights[(c, l)]))
            .collect()
    }

    pub fn with_meta(mut self, meta: ModelMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn with_stage(mut self, stage: &str) -> Self {
        self.meta.stage = stage.to_string();
        self
    }

    /// Feature columns with at least one nonzero entry, ascending.
    pub fn used_features(&self) -> Vec<usize> {
        let mut used: Vec<usize> = self.support.iter().map(|&(_, l)| l).collect();
        used.sort_unstable();
        used.dedup();
        used
    }

    /// Logits for a batch, accumulated from the support entries only, plus
    /// the bias. Errors when the feature counts disagree.
    pub fn predict(&self, feats: &FeatureMatrix) -> Result<Logits> {
        if feats.num_features() != self.num_features() {
            return Err(SlddError::DimensionMismatch {
                context: "predict".into(),
                expected: format!("{} features", self.num_features()),
                got: format!("{}", feats.num_features()),
            });
        }
        let n = feats.num_examples();
        let mut values = Array2::zeros((n, self.num_classes()));
        for &(class, feature) in &self.support {
            let w = self.weights[(class, feature)];
            let col = feats.values.column(feature);
            let mut out = values.column_mut(class);
            Zip::from(&mut out).and(&col).for_each(|o, &x| *o += w * x);
        }
        for mut row in values.rows_mut() {
            row += &self.bias;
        }
        Ok(Logits { values })
    }

    pub fn sparsity_metrics(&self) -> SparsityMetrics {
        SparsityMetrics {
            n_w: self.support.len(),
            n_per_class: self.support.len() as f64 / self.num_classes() as f64,
            total_features_used: self.used_features().len(),
        }
    }

    /// Embeds a model fitted on a column subset back into the full feature
    /// space: column `j` of this model becomes column `features[j]`.
    pub fn expand_features(&self, features: &[usize], total_features: usize) -> Result<Self> {
        if features.len() != self.num_features() {
            return Err(SlddError::DimensionMismatch {
                context: "expand_features".into(),
                expected: format!("{} columns", self.num_features()),
                got: format!("{}", features.len()),
            });
        }
        let mut weights = Array2::zeros((self.num_classes(), total_features));
        for (j, &l) in features.iter().enumerate() {
            weights.column_mut(l).assign(&self.weights.column(j));
        }
        SparseLinearModel::from_dense(weights, self.bias.clone(), self.meta.clone())
    }

    /// Rewrites a model fitted on standardized features so it acts on raw
    /// features: w' = w/σ per column and b' = b − Σ_l w_l μ_l/σ_l.
    /// Constant columns are skipped; they never carry weight.
    pub fn unnormalize(&self, stats: &NormStats) -> Result<Self> {
        if stats.mean.len() != self.num_features() {
            return Err(SlddError::DimensionMismatch {
                context: "unnormalize".into(),
                expected: format!("{} features", self.num_features()),
                got: format!("{} means", stats.mean.len()),
            });
        }
        let mut weights = self.weights.clone();
        let mut bias = self.bias.clone();
        for &(class, feature) in &self.support {
            if stats.is_constant(feature) {
                continue;
            }
            let w = self.weights[(class, feature)];
            let scaled = w / stats.std[feature];
            weights[(class, feature)] = scaled;
            bias[class] -= scaled * stats.mean[feature];
        }
        SparseLinearModel::from_dense(weights, bias, self.meta.clone())
    }

    /// Fraction of examples whose predicted class matches the label.
    pub fn accuracy(&self, feats: &FeatureMatrix, labels: &LabelVector) -> Result<f64> {
        let preds = self.predict(feats)?.argmax();
        let hits = preds
            .iter()
            .zip(labels.labels())
            .filter(|(p, y)| p == y)
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

fn check_finite_2d(values: &Array2<f64>, what: &str) -> Result<()> {
    if let Some(((r, c), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(SlddError::NonFinite {
            what: what.into(),
            index: vec![r, c],
        });
    }
    Ok(())
}
