//! Mini-batch SGD trainer for the linear head (and an optional toy linear
//! extractor that produces the feature maps) under the combined loss
//! L_CE + β·L_div. The same trainer serves both the dense training stage
//! (freeze_support = false, dense model) and the final masked finetune
//! stage, where gradient entries outside the model's support are zeroed
//! every step so the nonzero pattern never changes. The bias is always
//! trainable; feature dropout zeroes pooled features on the cross-entropy
//! path only, during training only, and the diversity path always sees the
//! undropped maps.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diversity::{diversity_loss, diversity_loss_grad};
use crate::error::{Result, SlddError};
use crate::saga::{mean_cross_entropy, softmax_rows_inplace};
use crate::tensor::{pool_maps, FeatureMapBatch, FeatureMatrix, LabelVector, SparseLinearModel};

/// Learning-rate step decay: multiply by `factor` every `every` epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub every: usize,
    pub factor: f64,
}

impl Default for LrDecay {
    fn default() -> Self {
        LrDecay {
            every: 10,
            factor: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    /// Weight of the diversity loss in the final objective.
    pub beta: f64,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: LrDecay,
    pub momentum: f64,
    /// Probability of zeroing each pooled feature on the CE path.
    pub feature_dropout: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Keep the nonzero pattern of W fixed.
    pub freeze_support: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            beta: 0.196,
            epochs: 40,
            lr: 1e-2,
            lr_decay: LrDecay::default(),
            momentum: 0.95,
            feature_dropout: 0.1,
            batch_size: 16,
            seed: 0,
            freeze_support: true,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.feature_dropout) {
            return Err(SlddError::Config(format!(
                "feature_dropout must be in [0, 1), got {}",
                self.feature_dropout
            )));
        }
        if !(self.lr_decay.factor > 0.0 && self.lr_decay.factor <= 1.0) {
            return Err(SlddError::Config(format!(
                "lr decay factor must be in (0, 1], got {}",
                self.lr_decay.factor
            )));
        }
        if self.lr_decay.every == 0 {
            return Err(SlddError::Config(
                "lr decay interval must be positive".into(),
            ));
        }
        if self.beta < 0.0 {
            return Err(SlddError::Config("beta must be nonnegative".into()));
        }
        if self.lr < 0.0 {
            return Err(SlddError::Config("lr must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(SlddError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Toy stand-in for a trainable backbone: a per-feature linear map over the
/// flattened spatial cells, identity at initialization, so the produced maps
/// start equal to the inputs and adapt during finetuning.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyExtractor {
    /// (F, H·W, H·W) mixing blocks.
    weights: Array3<f64>,
    map_h: usize,
    map_w: usize,
    pub trainable: bool,
}

impl ToyExtractor {
    pub fn identity(num_features: usize, map_h: usize, map_w: usize) -> Self {
        let cells = map_h * map_w;
        let mut weights = Array3::zeros((num_features, cells, cells));
        for l in 0..num_features {
            for d in 0..cells {
                weights[(l, d, d)] = 1.0;
            }
        }
        ToyExtractor {
            weights,
            map_h,
            map_w,
            trainable: true,
        }
    }

    pub fn from_weights(weights: Array3<f64>, map_h: usize, map_w: usize) -> Result<Self> {
        let cells = map_h * map_w;
        let (_, rows, cols) = weights.dim();
        if rows != cells || cols != cells {
            return Err(SlddError::DimensionMismatch {
                context: "extractor weights".into(),
                expected: format!("{cells}x{cells} blocks"),
                got: format!("{rows}x{cols}"),
            });
        }
        if let Some((idx, _)) = weights.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(SlddError::NonFinite {
                what: "extractor weights".into(),
                index: vec![idx.0, idx.1, idx.2],
            });
        }
        Ok(ToyExtractor {
            weights,
            map_h,
            map_w,
            trainable: true,
        })
    }

    pub fn weights(&self) -> &Array3<f64> {
        &self.weights
    }

    pub fn num_features(&self) -> usize {
        self.weights.dim().0
    }

    pub fn map_shape(&self) -> (usize, usize) {
        (self.map_h, self.map_w)
    }

    /// Applies the per-feature mixing to every example.
    pub fn forward(&self, inputs: &FeatureMapBatch) -> Result<FeatureMapBatch> {
        let (n, f, h, w) = inputs.values().dim();
        if f != self.num_features() || (h, w) != (self.map_h, self.map_w) {
            return Err(SlddError::DimensionMismatch {
                context: "extractor forward".into(),
                expected: format!(
                    "{}x{}x{} maps",
                    self.num_features(),
                    self.map_h,
                    self.map_w
                ),
                got: format!("{f}x{h}x{w}"),
            });
        }
        let cells = h * w;
        let flat = inputs
            .values()
            .to_shape((n, f, cells))
            .expect("contiguous batch")
            .to_owned();
        let mut out = Array3::<f64>::zeros((n, f, cells));
        for l in 0..f {
            let x_l = flat.index_axis(Axis(1), l); // N×cells
            let block = self.weights.index_axis(Axis(0), l); // cells×cells
            let produced = x_l.dot(&block.t());
            out.index_axis_mut(Axis(1), l).assign(&produced);
        }
        let reshaped = out
            .to_shape((n, f, h, w))
            .expect("contiguous output")
            .to_owned();
        FeatureMapBatch::new(reshaped)
    }
}

/// What the trainer consumes: spatial maps (raw inputs when an extractor is
/// attached) or pooled features for β = 0 head-only training.
pub enum FinetuneData<'a> {
    Pooled(&'a FeatureMatrix),
    Maps(&'a FeatureMapBatch),
}

/// Per-epoch training curve entry, evaluated on the full training set
/// without dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub ce: f64,
    pub l_div: f64,
    pub objective: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub model: SparseLinearModel,
    pub extractor: Option<ToyExtractor>,
    pub curves: Vec<EpochStats>,
}

/// Mean cross-entropy and its logit gradient (softmax − onehot)/N.
pub fn cross_entropy_grad(logits: &Array2<f64>, labels: &LabelVector) -> (f64, Array2<f64>) {
    let loss = mean_cross_entropy(logits, labels);
    let mut grad = logits.clone();
    softmax_rows_inplace(&mut grad);
    for (i, &y) in labels.labels().iter().enumerate() {
        grad[(i, y)] -= 1.0;
    }
    grad /= labels.len() as f64;
    (loss, grad)
}

/// Trains the head (and optionally the extractor) under L_CE + β·L_div with
/// momentum SGD and stepwise lr decay. Returns the trained model (support
/// unchanged when frozen), the updated extractor, and per-epoch curves.
pub fn finetune(
    data: FinetuneData<'_>,
    labels: &LabelVector,
    model: &SparseLinearModel,
    config: &FinetuneConfig,
    extractor: Option<&ToyExtractor>,
) -> Result<FinetuneResult> {
    config.validate()?;
    if config.beta > 0.0 && matches!(data, FinetuneData::Pooled(_)) {
        return Err(SlddError::Config(
            "a positive beta needs spatial maps, not pooled features".into(),
        ));
    }
    if config.freeze_support && model.support().is_empty() {
        return Err(SlddError::Config(
            "freeze_support needs a model with a nonempty support".into(),
        ));
    }
    let raw_maps: Option<&FeatureMapBatch> = match data {
        FinetuneData::Maps(maps) => Some(maps),
        FinetuneData::Pooled(_) => None,
    };
    let pooled_data: Option<&FeatureMatrix> = match data {
        FinetuneData::Pooled(feats) => Some(feats),
        FinetuneData::Maps(_) => None,
    };
    if extractor.is_some() && raw_maps.is_none() {
        return Err(SlddError::Config(
            "an extractor needs map-shaped inputs".into(),
        ));
    }

    let n = raw_maps
        .map(|m| m.num_examples())
        .or_else(|| pooled_data.map(|p| p.num_examples()))
        .expect("one data source");
    if labels.len() != n {
        return Err(SlddError::DimensionMismatch {
            context: "finetune".into(),
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }

    let c = model.num_classes();
    let f = model.num_features();
    let cells = raw_maps.map(|m| {
        let (h, w) = m.map_shape();
        h * w
    });

    let mut weights = model.weights().clone();
    let mut bias = model.bias().clone();
    let mut extractor_state = extractor.cloned();

    let support_mask: Option<Array2<f64>> = if config.freeze_support {
        let mut mask = Array2::zeros((c, f));
        for &(class, feature) in model.support() {
            mask[(class, feature)] = 1.0;
        }
        Some(mask)
    } else {
        None
    };

    let mut mom_weights: Array2<f64> = Array2::zeros((c, f));
    let mut mom_bias: Array1<f64> = Array1::zeros(c);
    let mut mom_extractor: Option<Array3<f64>> = extractor_state
        .as_ref()
        .map(|e| Array3::zeros(e.weights.dim()));

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curves = Vec::with_capacity(config.epochs);
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let lr = config.lr
            * config
                .lr_decay
                .factor
                .powi((epoch / config.lr_decay.every) as i32);
        order.shuffle(&mut rng);

        for batch in order.chunks(config.batch_size) {
            step += 1;
            let b = batch.len();
            let batch_labels = LabelVector::new(
                batch.iter().map(|&i| labels.labels()[i]).collect(),
                labels.num_classes(),
            )?;

            // forward: inputs -> maps -> pooled features
            let batch_inputs: Option<FeatureMapBatch> = raw_maps.map(|m| subset_maps(m, batch));
            let batch_maps: Option<FeatureMapBatch> = match (&batch_inputs, &extractor_state) {
                (Some(inputs), Some(extr)) => Some(extr.forward(inputs)?),
                (Some(inputs), None) => Some(inputs.clone()),
                (None, _) => None,
            };
            let pooled_raw: Array2<f64> = match (&batch_maps, pooled_data) {
                (Some(maps), _) => pool_maps(maps).values().clone(),
                (None, Some(feats)) => subset_rows(feats.values(), batch),
                (None, None) => unreachable!(),
            };

            // CE path sees dropped features; the diversity path does not
            let mut dropout_mask = Array2::<f64>::from_elem((b, f), 1.0);
            if config.feature_dropout > 0.0 {
                for v in dropout_mask.iter_mut() {
                    if rng.gen_bool(config.feature_dropout) {
                        *v = 0.0;
                    }
                }
            }
            let dropped = &pooled_raw * &dropout_mask;

            let mut logits = dropped.dot(&weights.t());
            for mut row in logits.rows_mut() {
                row += &bias;
            }
            let (ce, d_logits) = cross_entropy_grad(&logits, &batch_labels);
            if !ce.is_finite() {
                return Err(SlddError::TrainingAborted { epoch, step });
            }

            let mut d_weights = d_logits.t().dot(&dropped);
            let d_bias = d_logits.sum_axis(Axis(0));
            // gradient into pooled features, masked where dropout zeroed
            let d_pooled = &d_logits.dot(&weights) * &dropout_mask;

            let mut d_maps: Option<Array4<f64>> = batch_maps.as_ref().map(|maps| {
                let (bn, bf, bh, bw) = maps.values().dim();
                let mut grads = Array4::zeros((bn, bf, bh, bw));
                let spread = 1.0 / (bh * bw) as f64;
                for i in 0..bn {
                    for l in 0..bf {
                        let g = d_pooled[(i, l)] * spread;
                        grads
                            .index_axis_mut(Axis(0), i)
                            .index_axis_mut(Axis(0), l)
                            .mapv_inplace(|v| v + g);
                    }
                }
                grads
            });

            if config.beta > 0.0 {
                let maps = batch_maps.as_ref().expect("beta > 0 implies maps");
                let head = SparseLinearModel::from_dense(
                    weights.clone(),
                    bias.clone(),
                    model.meta().clone(),
                )?;
                let div = diversity_loss_grad(maps, &head, 0.0)?;
                d_weights = d_weights + config.beta * &div.d_weights;
                if let Some(dm) = d_maps.as_mut() {
                    *dm = &*dm + &(config.beta * &div.d_maps);
                }
            }

            if let Some(mask) = &support_mask {
                d_weights = d_weights * mask;
            }

            // momentum SGD
            mom_weights = config.momentum * &mom_weights + &d_weights;
            mom_bias = config.momentum * &mom_bias + &d_bias;
            weights = weights - lr * &mom_weights;
            bias = bias - lr * &mom_bias;
            if weights.iter().any(|v| !v.is_finite()) || bias.iter().any(|v| !v.is_finite()) {
                return Err(SlddError::TrainingAborted { epoch, step });
            }

            if let (Some(extr), Some(mom), Some(dm), Some(inputs), Some(cell_count)) = (
                extractor_state.as_mut(),
                mom_extractor.as_mut(),
                d_maps.as_ref(),
                batch_inputs.as_ref(),
                cells,
            ) {
                if extr.trainable {
                    let flat_in = inputs
                        .values()
                        .to_shape((b, f, cell_count))
                        .expect("contiguous inputs")
                        .to_owned();
                    let flat_grad = dm
                        .to_shape((b, f, cell_count))
                        .expect("contiguous grads")
                        .to_owned();
                    for l in 0..f {
                        let x_l = flat_in.index_axis(Axis(1), l); // B×cells
                        let g_l = flat_grad.index_axis(Axis(1), l); // B×cells
                        let block_grad = g_l.t().dot(&x_l); // cells×cells
                        let mut mom_block = mom.index_axis_mut(Axis(0), l);
                        mom_block.zip_mut_with(&block_grad, |m, &g| {
                            *m = config.momentum * *m + g;
                        });
                        let mut weight_block = extr.weights.index_axis_mut(Axis(0), l);
                        weight_block.zip_mut_with(&mom_block.view(), |w, &m| {
                            *w -= lr * m;
                        });
                    }
                }
            }
        }

        // epoch-end evaluation on the full set, no dropout
        let eval_maps: Option<FeatureMapBatch> = match (raw_maps, &extractor_state) {
            (Some(maps), Some(extr)) => Some(extr.forward(maps)?),
            (Some(maps), None) => Some(maps.clone()),
            (None, _) => None,
        };
        let eval_model =
            SparseLinearModel::from_dense(weights.clone(), bias.clone(), model.meta().clone())?;
        let eval_pooled: FeatureMatrix = match (&eval_maps, pooled_data) {
            (Some(maps), _) => pool_maps(maps),
            (None, Some(feats)) => feats.clone(),
            (None, None) => unreachable!(),
        };
        let logits = eval_model.predict(&eval_pooled)?;
        let ce = mean_cross_entropy(logits.values(), labels);
        let l_div = match &eval_maps {
            Some(maps) if config.beta > 0.0 => diversity_loss(maps, &eval_model)?.mean,
            _ => 0.0,
        };
        let objective = ce + config.beta * l_div;
        if !objective.is_finite() {
            return Err(SlddError::TrainingAborted { epoch, step });
        }
        let accuracy = eval_model.accuracy(&eval_pooled, labels)?;
        curves.push(EpochStats {
            epoch,
            ce,
            l_div,
            objective,
            accuracy,
        });
    }

    let final_model =
        SparseLinearModel::from_dense(weights, bias, model.meta().clone())?.with_stage("finetuned");
    Ok(FinetuneResult {
        model: final_model,
        extractor: extractor_state,
        curves,
    })
}

fn subset_maps(maps: &FeatureMapBatch, indices: &[usize]) -> FeatureMapBatch {
    let (_, f, h, w) = maps.values().dim();
    let mut out = Array4::zeros((indices.len(), f, h, w));
    for (row, &i) in indices.iter().enumerate() {
        out.index_axis_mut(Axis(0), row)
            .assign(&maps.values().index_axis(Axis(0), i));
    }
    FeatureMapBatch::new(out).expect("subset of a finite batch is finite")
}

fn subset_rows(values: &Array2<f64>, indices: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((indices.len(), values.ncols()));
    for (row, &i) in indices.iter().enumerate() {
        out.row_mut(row).assign(&values.row(i));
    }
    out
}
