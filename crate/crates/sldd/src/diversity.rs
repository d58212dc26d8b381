//! Feature-diversity loss and the loc_k evaluation metric.
//!
//! The loss turns each feature map into a spatial distribution with a
//! softmax, rescales it by how visible the feature is (pooled value over the
//! max pooled value) and how much the predicted class uses it (|w| over the
//! class row norm), then cross-channel max-pools: the batch mean of
//! −Σ_ij max_l ŝ^l_ij drops when differently weighted maps attend to
//! different locations. loc_k applies plain softmax to the k most-weighted
//! maps of the predicted class and measures how separated they are, in
//! [1/k, 1].
//!
//! Gradients are analytic: the predicted class is held constant, max
//! operations route to their unique attaining element, and both scaling
//! denominators are differentiated through. Ties at the requested strictness
//! are reported as errors so callers can perturb.

use ndarray::{Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlddError};
use crate::tensor::{argmax_row, pool_maps, FeatureMapBatch, LabelVector, SparseLinearModel};

/// Per-feature scaling record for one example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleFactors {
    /// Sum of the spatial softmax before scaling; 1 up to rounding.
    pub softmax_sum: f64,
    /// Pooled value divided by the maximum pooled value.
    pub pooled_ratio: f64,
    /// |w_ĉl| divided by the l2 norm of the predicted class's weight row.
    pub weight_ratio: f64,
}

/// Scaled map stack ŝ for one example.
#[derive(Debug, Clone)]
pub struct ScaledMapStack {
    pub values: Array3<f64>,
    pub scale_factors: Vec<ScaleFactors>,
    pub predicted_class: usize,
    /// Set when the argmax over logits was attained more than once; the
    /// lowest class index was used.
    pub class_tie: bool,
}

/// Spatial softmax of a single map, shift-invariant by construction.
pub fn spatial_softmax(map: ArrayView2<'_, f64>) -> Array2<f64> {
    let max = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = map.mapv(|v| (v - max).exp());
    let sum: f64 = out.iter().sum();
    out.mapv_inplace(|v| v / sum);
    out
}

fn predicted_class(logits: ArrayView1<'_, f64>) -> (usize, bool) {
    let row: Vec<f64> = logits.iter().copied().collect();
    let best = argmax_row(&row);
    let ties = row.iter().filter(|&&v| v == row[best]).count();
    (best, ties > 1)
}

/// Builds the scaled stack ŝ for one example from its maps and logits. The
/// logits must come from the model applied to the average-pooled maps.
pub fn scaled_maps(
    maps_n: ArrayView3<'_, f64>,
    model: &SparseLinearModel,
    logits_n: ArrayView1<'_, f64>,
) -> Result<ScaledMapStack> {
    let (f, h, w) = maps_n.dim();
    if f != model.num_features() || logits_n.len() != model.num_classes() {
        return Err(SlddError::DimensionMismatch {
            context: "scaled_maps".into(),
            expected: format!(
                "{} features, {} classes",
                model.num_features(),
                model.num_classes()
            ),
            got: format!("{f} maps, {} logits", logits_n.len()),
        });
    }
    let (class, class_tie) = predicted_class(logits_n);
    let weight_row = model.weights().row(class);
    let row_norm = weight_row.iter().map(|v| v * v).sum::<f64>().sqrt();

    let cells = (h * w) as f64;
    let pooled: Vec<f64> = (0..f)
        .map(|l| maps_n.index_axis(ndarray::Axis(0), l).sum() / cells)
        .collect();
    let pooled_max = pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut values = Array3::zeros((f, h, w));
    let mut scale_factors = Vec::with_capacity(f);
    for l in 0..f {
        let softmax = spatial_softmax(maps_n.index_axis(ndarray::Axis(0), l));
        let softmax_sum: f64 = softmax.iter().sum();
        let pooled_ratio = if pooled_max == 0.0 {
            0.0
        } else {
            pooled[l] / pooled_max
        };
        let weight_ratio = if row_norm == 0.0 {
            0.0
        } else {
            weight_row[l].abs() / row_norm
        };
        let scale = pooled_ratio * weight_ratio;
        values
            .index_axis_mut(ndarray::Axis(0), l)
            .assign(&(&softmax * scale));
        scale_factors.push(ScaleFactors {
            softmax_sum,
            pooled_ratio,
            weight_ratio,
        });
    }
    Ok(ScaledMapStack {
        values,
        scale_factors,
        predicted_class: class,
        class_tie,
    })
}

/// Cross-channel max-pooled loss of a prepared stack: −Σ_ij max_l s^l_ij.
pub fn stack_loss(stack: ArrayView3<'_, f64>) -> f64 {
    let (f, h, w) = stack.dim();
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let mut best = f64::NEG_INFINITY;
            for l in 0..f {
                best = best.max(stack[(l, i, j)]);
            }
            total += best;
        }
    }
    -total
}

/// Diversity loss of a batch: per-example values and their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityLoss {
    pub mean: f64,
    pub per_example: Vec<f64>,
}

pub fn diversity_loss(maps: &FeatureMapBatch, model: &SparseLinearModel) -> Result<DiversityLoss> {
    let pooled = pool_maps(maps);
    let logits = model.predict(&pooled)?;
    let n = maps.num_examples();
    let mut per_example = Vec::with_capacity(n);
    for i in 0..n {
        let stack = scaled_maps(
            maps.values().index_axis(ndarray::Axis(0), i),
            model,
            logits.values().row(i),
        )?;
        per_example.push(stack_loss(stack.values.view()));
    }
    let mean = per_example.iter().sum::<f64>() / n as f64;
    Ok(DiversityLoss { mean, per_example })
}

/// Analytic gradient of the batch-mean diversity loss.
#[derive(Debug, Clone)]
pub struct DiversityGrad {
    pub loss: DiversityLoss,
    /// d mean-loss / d map entries, same shape as the input batch.
    pub d_maps: Array4<f64>,
    /// d mean-loss / d W; each example contributes only to its predicted
    /// class's row.
    pub d_weights: Array2<f64>,
}

/// Computes the loss and its gradients w.r.t. the maps and the predicted
/// class's weight rows. The predicted class is treated as a constant; maxima
/// route gradient to their attaining element. Competing values closer than
/// `tie_tol` raise [`SlddError::Tie`] listing the tied indices.
pub fn diversity_loss_grad(
    maps: &FeatureMapBatch,
    model: &SparseLinearModel,
    tie_tol: f64,
) -> Result<DiversityGrad> {
    let pooled = pool_maps(maps);
    let logits = model.predict(&pooled)?;
    let (n, f, h, w) = maps.values().dim();
    let cells = (h * w) as f64;
    let c = model.num_classes();

    let mut per_example = Vec::with_capacity(n);
    let mut d_maps = Array4::zeros((n, f, h, w));
    let mut d_weights = Array2::zeros((c, f));

    for i in 0..n {
        let maps_n = maps.values().index_axis(ndarray::Axis(0), i);
        let logit_row = logits.values().row(i);
        let (class, _) = predicted_class(logit_row);
        let weight_row = model.weights().row(class);
        let row_norm = weight_row.iter().map(|v| v * v).sum::<f64>().sqrt();

        if row_norm == 0.0 {
            // every scaled map is zero: constant loss, zero gradient, and
            // any logit tie is immaterial
            per_example.push(0.0);
            continue;
        }
        check_unique_top(logit_row.iter().copied(), tie_tol, "predicted class")?;

        let pooled_row: Vec<f64> = (0..f)
            .map(|l| maps_n.index_axis(ndarray::Axis(0), l).sum() / cells)
            .collect();
        check_unique_top(pooled_row.iter().copied(), tie_tol, "pooled feature max")?;
        let m_star = argmax_row(&pooled_row);
        let pooled_max = pooled_row[m_star];
        if pooled_max == 0.0 {
            return Err(SlddError::Tie {
                context: "pooled feature max is exactly zero".into(),
                indices: vec![m_star],
            });
        }

        let mut softmax = Array3::zeros((f, h, w));
        for l in 0..f {
            softmax
                .index_axis_mut(ndarray::Axis(0), l)
                .assign(&spatial_softmax(maps_n.index_axis(ndarray::Axis(0), l)));
        }
        let rho: Vec<f64> = pooled_row.iter().map(|&p| p / pooled_max).collect();
        let omega: Vec<f64> = weight_row.iter().map(|&v| v.abs() / row_norm).collect();
        let scale: Vec<f64> = rho.iter().zip(&omega).map(|(r, o)| r * o).collect();

        // winner channel per cell and per-channel winning softmax mass
        let mut mass = vec![0.0f64; f];
        let mut winner = Array2::<usize>::zeros((h, w));
        for p in 0..h {
            for q in 0..w {
                let mut best = (0usize, f64::NEG_INFINITY);
                let mut second = f64::NEG_INFINITY;
                for l in 0..f {
                    let value = softmax[(l, p, q)] * scale[l];
                    if value > best.1 {
                        second = best.1;
                        best = (l, value);
                    } else if value > second {
                        second = value;
                    }
                }
                if f > 1 && best.1 - second <= tie_tol {
                    return Err(SlddError::Tie {
                        context: format!("channel max at cell ({p}, {q})"),
                        indices: (0..f)
                            .filter(|&l| best.1 - softmax[(l, p, q)] * scale[l] <= tie_tol)
                            .collect(),
                    });
                }
                winner[(p, q)] = best.0;
                mass[best.0] += softmax[(best.0, p, q)];
            }
        }

        let loss_n: f64 = -scale.iter().zip(&mass).map(|(s, m)| s * m).sum::<f64>();
        per_example.push(loss_n);

        let inv_n = 1.0 / n as f64;
        // pooled-ratio path: df_l enters its own ratio, df_{m*} enters all
        let weighted_mass_sum: f64 = (0..f).map(|l| omega[l] * mass[l] * rho[l]).sum();
        for l in 0..f {
            let coeff_pool = -omega[l] * mass[l] / (cells * pooled_max);
            let coeff_star = if l == m_star {
                weighted_mass_sum / (cells * pooled_max)
            } else {
                0.0
            };
            for p in 0..h {
                for q in 0..w {
                    let indicator = if winner[(p, q)] == l { 1.0 } else { 0.0 };
                    let softmax_term = -scale[l] * softmax[(l, p, q)] * (indicator - mass[l]);
                    d_maps[(i, l, p, q)] += inv_n * (softmax_term + coeff_pool + coeff_star);
                }
            }
        }

        // weight path: ω_k = |w_k| / ‖w‖, subgradient 0 at w_k = 0
        let weighted_abs_sum: f64 = (0..f)
            .map(|l| rho[l] * mass[l] * weight_row[l].abs())
            .sum();
        for k in 0..f {
            let sign = if weight_row[k] > 0.0 {
                1.0
            } else if weight_row[k] < 0.0 {
                -1.0
            } else {
                0.0
            };
            let direct = -rho[k] * mass[k] * sign / row_norm;
            let through_norm = weighted_abs_sum * weight_row[k] / row_norm.powi(3);
            d_weights[(class, k)] += inv_n * (direct + through_norm);
        }
    }

    let mean = per_example.iter().sum::<f64>() / n as f64;
    Ok(DiversityGrad {
        loss: DiversityLoss { mean, per_example },
        d_maps,
        d_weights,
    })
}

fn check_unique_top(values: impl Iterator<Item = f64>, tie_tol: f64, context: &str) -> Result<()> {
    let values: Vec<f64> = values.collect();
    if values.len() < 2 {
        return Ok(());
    }
    let top = argmax_row(&values);
    let mut tied = vec![top];
    for (idx, &v) in values.iter().enumerate() {
        if idx != top && values[top] - v <= tie_tol {
            tied.push(idx);
        }
    }
    if tied.len() > 1 {
        tied.sort_unstable();
        return Err(SlddError::Tie {
            context: context.into(),
            indices: tied,
        });
    }
    Ok(())
}

/// Which class each example is scored against in loc_k.
pub enum LocClasses<'a> {
    /// argmax of the model's logits (the default, matching the loss)
    Predicted,
    /// externally supplied classes, e.g. ground-truth labels
    Given(&'a LabelVector),
}

/// loc_k report: per-example values plus the filtered aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub k: usize,
    pub per_example: Vec<f64>,
    /// Mean over examples whose class uses at least k features (absent when
    /// no example passes the filter). The headline number.
    pub mean_per_example: Option<f64>,
    /// Mean over classes (each class contributing the mean of its examples)
    /// restricted to classes that use at least k features.
    pub mean_per_class: Option<f64>,
    /// Human-readable description of the aggregation filter.
    pub population: String,
}

/// Computes loc_k: for each example, plain spatial softmax over the k
/// most-weighted maps of its class (ties toward lower feature indices),
/// then the cross-channel max mass divided by k.
pub fn loc_k(
    maps: &FeatureMapBatch,
    model: &SparseLinearModel,
    classes: LocClasses<'_>,
    k: usize,
) -> Result<DiversityReport> {
    if k == 0 {
        return Err(SlddError::Config("loc_k needs k >= 1".into()));
    }
    let n = maps.num_examples();
    let f = maps.num_features();
    if f != model.num_features() {
        return Err(SlddError::DimensionMismatch {
            context: "loc_k".into(),
            expected: format!("{} features", model.num_features()),
            got: format!("{f}"),
        });
    }
    let example_classes: Vec<usize> = match classes {
        LocClasses::Predicted => {
            let pooled = pool_maps(maps);
            model.predict(&pooled)?.argmax()
        }
        LocClasses::Given(labels) => {
            if labels.len() != n {
                return Err(SlddError::DimensionMismatch {
                    context: "loc_k labels".into(),
                    expected: format!("{n}"),
                    got: format!("{}", labels.len()),
                });
            }
            labels.labels().to_vec()
        }
    };

    let nonzeros_per_class: Vec<usize> = (0..model.num_classes())
        .map(|c| model.weights().row(c).iter().filter(|&&v| v != 0.0).count())
        .collect();

    let mut per_example = Vec::with_capacity(n);
    for i in 0..n {
        let class = example_classes[i];
        let top = top_k_features(model.weights().row(class), k);
        let maps_n = maps.values().index_axis(ndarray::Axis(0), i);
        let softmaxes: Vec<Array2<f64>> = top
            .iter()
            .map(|&l| spatial_softmax(maps_n.index_axis(ndarray::Axis(0), l)))
            .collect();
        let (h, w) = (maps_n.dim().1, maps_n.dim().2);
        let mut total = 0.0;
        for p in 0..h {
            for q in 0..w {
                let mut best = f64::NEG_INFINITY;
                for s in &softmaxes {
                    best = best.max(s[(p, q)]);
                }
                total += best;
            }
        }
        per_example.push(total / k as f64);
    }

    let passes = |i: usize| nonzeros_per_class[example_classes[i]] >= k;
    let passing: Vec<usize> = (0..n).filter(|&i| passes(i)).collect();
    let mean_per_example = if passing.is_empty() {
        None
    } else {
        Some(passing.iter().map(|&i| per_example[i]).sum::<f64>() / passing.len() as f64)
    };

    let mut class_means = Vec::new();
    for class in 0..model.num_classes() {
        if nonzeros_per_class[class] < k {
            continue;
        }
        let member_values: Vec<f64> = (0..n)
            .filter(|&i| example_classes[i] == class)
            .map(|i| per_example[i])
            .collect();
        if !member_values.is_empty() {
            class_means.push(member_values.iter().sum::<f64>() / member_values.len() as f64);
        }
    }
    let mean_per_class = if class_means.is_empty() {
        None
    } else {
        Some(class_means.iter().sum::<f64>() / class_means.len() as f64)
    };

    Ok(DiversityReport {
        k,
        per_example,
        mean_per_example,
        mean_per_class,
        population: format!("examples (resp. classes) whose class has >= {k} nonzero weights"),
    })
}

/// Indices of the k largest |weights|, ties toward the lower feature index.
fn top_k_features(weights: ArrayView1<'_, f64>, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b]
            .abs()
            .partial_cmp(&weights[a].abs())
            .expect("weights are finite")
            .then(a.cmp(&b))
    });
    order.truncate(k.min(weights.len()));
    order
}
