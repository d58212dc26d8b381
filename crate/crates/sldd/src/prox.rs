//! Proximal operators for the elastic-net penalty: the scalar
//! soft-threshold, the group (column) variant, and the gated group variant
//! used during feature selection, which keeps a column only if it is already
//! selected or currently carries the maximum norm among the candidates.

use ndarray::{Array2, ArrayView1};
use std::collections::BTreeSet;

/// Which proximal operator a solver run applies after each update.
#[derive(Debug, Clone, PartialEq)]
pub enum ProxKind {
    /// Entrywise soft-threshold with ridge shrinkage.
    Elementwise,
    /// Column-norm soft-threshold (group penalty over features).
    Group,
    /// Group prox restricted to the selected columns plus the single
    /// maximum-norm candidate outside the selection.
    Gated(BTreeSet<usize>),
}

/// Scalar elastic-net prox: soft-threshold at `lambda1`, then shrink by
/// `1 + lambda2`. Returns (β−λ1)/(1+λ2) for β > λ1, (β+λ1)/(1+λ2) for
/// β < −λ1 and zero inside the dead zone.
pub fn prox_elementwise(beta: f64, lambda1: f64, lambda2: f64) -> f64 {
    if beta > lambda1 {
        (beta - lambda1) / (1.0 + lambda2)
    } else if beta < -lambda1 {
        (beta + lambda1) / (1.0 + lambda2)
    } else {
        0.0
    }
}

/// Column scaling factor for the group prox: (‖w‖−λ1)/((1+λ2)‖w‖) when the
/// norm clears the threshold, otherwise zero.
fn group_scale(norm: f64, lambda1: f64, lambda2: f64) -> f64 {
    if norm > lambda1 {
        (norm - lambda1) / ((1.0 + lambda2) * norm)
    } else {
        0.0
    }
}

pub fn column_norm(col: ArrayView1<'_, f64>) -> f64 {
    col.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Group prox over feature columns of a C×F weight matrix.
pub fn prox_group(weights: &Array2<f64>, lambda1: f64, lambda2: f64) -> Array2<f64> {
    let mut out = weights.clone();
    for mut col in out.columns_mut() {
        let norm = column_norm(col.view());
        let scale = group_scale(norm, lambda1, lambda2);
        if scale == 0.0 {
            col.fill(0.0);
        } else {
            col.mapv_inplace(|v| v * scale);
        }
    }
    out
}

/// Gated group prox. A column survives (scaled exactly as [`prox_group`])
/// iff its norm clears λ1 and it is either already selected or it is the
/// unique maximum-norm column among the non-selected ones; ties on the
/// maximum break toward the lowest feature index. Every other column is
/// zeroed, so at most one new feature can be nonzero at a time.
pub fn prox_group_gated(
    weights: &Array2<f64>,
    lambda1: f64,
    lambda2: f64,
    selected: &BTreeSet<usize>,
) -> Array2<f64> {
    let candidate = max_norm_candidate(weights, selected);
    let mut out = weights.clone();
    for (l, mut col) in out.columns_mut().into_iter().enumerate() {
        let admitted = selected.contains(&l) || candidate == Some(l);
        let norm = column_norm(col.view());
        let scale = if admitted {
            group_scale(norm, lambda1, lambda2)
        } else {
            0.0
        };
        if scale == 0.0 {
            col.fill(0.0);
        } else {
            col.mapv_inplace(|v| v * scale);
        }
    }
    out
}

/// The single non-selected column with the largest norm (lowest index on
/// ties), or None when every column is selected.
pub fn max_norm_candidate(weights: &Array2<f64>, selected: &BTreeSet<usize>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (l, col) in weights.columns().into_iter().enumerate() {
        if selected.contains(&l) {
            continue;
        }
        let norm = column_norm(col);
        match best {
            Some((_, bn)) if norm <= bn => {}
            _ => best = Some((l, norm)),
        }
    }
    best.map(|(l, _)| l)
}

/// Applies the configured prox to a weight matrix.
pub fn apply_prox(kind: &ProxKind, weights: &Array2<f64>, lambda1: f64, lambda2: f64) -> Array2<f64> {
    match kind {
        ProxKind::Elementwise => weights.mapv(|v| prox_elementwise(v, lambda1, lambda2)),
        ProxKind::Group => prox_group(weights, lambda1, lambda2),
        ProxKind::Gated(selected) => prox_group_gated(weights, lambda1, lambda2, selected),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::{prop_assert, proptest};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Grid-search oracle for the scalar prox objective
    /// ½(z−β)² + λ1|z| + (λ2/2)z².
    fn grid_argmin_scalar(beta: f64, lambda1: f64, lambda2: f64, step: f64) -> f64 {
        // The minimizer is a shrinkage of β, so [min(0,β), max(0,β)] brackets it.
        let (lo, hi) = (beta.min(0.0), beta.max(0.0));
        let objective = |z: f64| 0.5 * (z - beta) * (z - beta) + lambda1 * z.abs() + 0.5 * lambda2 * z * z;
        let mut best = (lo, objective(lo));
        let steps = ((hi - lo) / step).ceil() as usize;
        for k in 1..=steps {
            let z = (lo + k as f64 * step).min(hi);
            let val = objective(z);
            if val < best.1 {
                best = (z, val);
            }
        }
        best.0
    }

    /// Line-search oracle for the group prox: reduce to the scalar problem
    /// along the column direction, min over t ≥ 0 of
    /// ½(t−‖w‖)² + λ1·t + (λ2/2)t².
    fn grid_argmin_group_scale(norm: f64, lambda1: f64, lambda2: f64, step: f64) -> f64 {
        let objective =
            |t: f64| 0.5 * (t - norm) * (t - norm) + lambda1 * t + 0.5 * lambda2 * t * t;
        let mut best = (0.0, objective(0.0));
        let steps = (norm / step).ceil() as usize;
        for k in 1..=steps {
            let t = (k as f64 * step).min(norm);
            let val = objective(t);
            if val < best.1 {
                best = (t, val);
            }
        }
        best.0
    }

    #[test]
    fn elementwise_soft_threshold() {
        assert_eq!(prox_elementwise(2.0, 0.5, 0.0), 1.5);
    }

    #[test]
    fn elementwise_dead_zone() {
        assert_eq!(prox_elementwise(0.3, 0.5, 7.0), 0.0);
    }

    #[test]
    fn elementwise_negative_branch_matches_grid() {
        let out = prox_elementwise(-2.0, 0.5, 1.0);
        assert!((out - (-0.75)).abs() < 1e-12);
        let oracle = grid_argmin_scalar(-2.0, 0.5, 1.0, 1e-5);
        assert!((out - oracle).abs() <= 1e-5, "prox {out} vs grid {oracle}");
    }

    #[test]
    fn group_direct_formula() {
        let w = array![[3.0], [4.0]];
        let out = prox_group(&w, 1.0, 0.25);
        assert!((out[(0, 0)] - 1.92).abs() < 1e-12);
        assert!((out[(1, 0)] - 2.56).abs() < 1e-12);
    }

    #[test]
    fn group_below_threshold_zeroes() {
        let w = array![[0.1], [0.1]];
        let out = prox_group(&w, 1.0, 0.0);
        assert_eq!(out, array![[0.0], [0.0]]);
    }

    #[test]
    fn group_matches_line_search_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = ndarray::Array2::from_shape_fn((5, 8), |_| rng.gen_range(-2.0..2.0));
        let (l1, l2) = (0.9, 0.3);
        let out = prox_group(&w, l1, l2);
        for l in 0..8 {
            let norm = column_norm(w.column(l));
            let t = grid_argmin_group_scale(norm, l1, l2, 1e-5);
            for c in 0..5 {
                let expected = if norm > 0.0 { w[(c, l)] / norm * t } else { 0.0 };
                assert!(
                    (out[(c, l)] - expected).abs() <= 2e-5,
                    "col {l} row {c}: {} vs {}",
                    out[(c, l)],
                    expected
                );
            }
        }
    }

    #[test]
    fn gated_unique_max_survives() {
        let w = array![[5.0, 4.0, 3.0]];
        let selected = BTreeSet::new();
        let out = prox_group_gated(&w, 1.0, 0.5, &selected);
        assert!((out[(0, 0)] - 5.0 * (4.0 / 5.0) / 1.5).abs() < 1e-12);
        assert_eq!(out[(0, 1)], 0.0);
        assert_eq!(out[(0, 2)], 0.0);
    }

    #[test]
    fn gated_selected_columns_pass() {
        let w = array![[5.0, 4.0, 3.0]];
        let selected: BTreeSet<usize> = [2].into_iter().collect();
        let out = prox_group_gated(&w, 1.0, 0.0, &selected);
        assert!(out[(0, 0)] != 0.0, "max-norm candidate survives");
        assert_eq!(out[(0, 1)], 0.0, "non-selected non-max zeroed");
        assert!(out[(0, 2)] != 0.0, "selected column survives");
    }

    #[test]
    fn gated_with_all_selected_equals_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = ndarray::Array2::from_shape_fn((3, 6), |_| rng.gen_range(-2.0..2.0));
        let selected: BTreeSet<usize> = (0..6).collect();
        let gated = prox_group_gated(&w, 0.7, 0.2, &selected);
        let plain = prox_group(&w, 0.7, 0.2);
        assert_eq!(gated, plain);
    }

    #[test]
    fn gated_ties_break_to_lowest_index() {
        let w = array![[2.0, 2.0, 1.0]];
        let out = prox_group_gated(&w, 0.5, 0.0, &BTreeSet::new());
        assert!(out[(0, 0)] != 0.0);
        assert_eq!(out[(0, 1)], 0.0);
    }

    proptest! {
        /// Shrinkage: |prox(β)| ≤ |β| and the sign is kept or collapsed to 0.
        #[test]
        fn prop_elementwise_shrinks(
            beta in -10.0f64..10.0,
            l1 in 0.0f64..5.0,
            l2 in 0.0f64..5.0,
        ) {
            let out = prox_elementwise(beta, l1, l2);
            prop_assert!(out.abs() <= beta.abs() + 1e-15);
            prop_assert!(out == 0.0 || out.signum() == beta.signum());
        }

        /// Output columns are nonnegative multiples of the input columns.
        #[test]
        fn prop_group_preserves_direction(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = ndarray::Array2::from_shape_fn((4, 5), |_| rng.gen_range(-3.0..3.0));
            let l1 = rng.gen_range(0.0..2.0);
            let l2 = rng.gen_range(0.0..2.0);
            let out = prox_group(&w, l1, l2);
            for l in 0..5 {
                let norm_in = column_norm(w.column(l));
                let norm_out = column_norm(out.column(l));
                if norm_out > 0.0 {
                    // cosine similarity of surviving column with input is 1
                    let dot: f64 = w.column(l).iter().zip(out.column(l)).map(|(a, b)| a * b).sum();
                    prop_assert!((dot / (norm_in * norm_out) - 1.0).abs() < 1e-12);
                }
                prop_assert!(norm_out <= norm_in + 1e-15);
            }
        }

        /// Under the gate, nonzero columns are always inside
        /// selected ∪ {max-norm candidate}.
        #[test]
        fn prop_gated_support_bound(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = ndarray::Array2::from_shape_fn((3, 7), |_| rng.gen_range(-2.0..2.0));
            let selected: BTreeSet<usize> =
                (0..7).filter(|_| rng.gen_bool(0.3)).collect();
            let out = prox_group_gated(&w, 0.3, 0.1, &selected);
            let candidate = max_norm_candidate(&w, &selected);
            for l in 0..7 {
                if column_norm(out.column(l)) > 0.0 {
                    prop_assert!(selected.contains(&l) || Some(l) == candidate);
                }
            }
        }
    }
}
