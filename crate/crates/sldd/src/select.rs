//! Reduces the feature pool to a small ordered set by rerunning the path
//! solver under the gated group prox: each restart admits at most one new
//! column (the current maximum-norm candidate), stops as soon as a path
//! solution actually uses a feature outside the selection, and appends that
//! feature. Exactly one feature enters per restart.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::error::{Result, SlddError};
use crate::prox::ProxKind;
use crate::saga::{drive_path, PathStep, SolverConfig};
use crate::tensor::{FeatureMatrix, LabelVector};

/// Default elastic-net mixing weight for the selection fits.
pub const SELECT_ALPHA: f64 = 0.8;
/// The selection schedule runs at one tenth of the usual regularization
/// strength, which lets features enter almost immediately.
pub const SELECT_LAMBDA_SCALE: f64 = 0.1;

/// Record of one completed restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartRecord {
    pub restart_index: usize,
    pub added_feature: usize,
    pub lambda_at_entry: f64,
    pub column_norm: f64,
}

/// Ordered set of selected feature indices plus per-restart provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionState {
    pub selected: Vec<usize>,
    pub history: Vec<RestartRecord>,
}

impl SelectionState {
    pub fn selected_set(&self) -> BTreeSet<usize> {
        self.selected.iter().copied().collect()
    }
}

/// Selects `n_target` features. Each outer iteration recomputes λ_max, runs
/// the scaled-down schedule with the gated group prox warm-started along the
/// path, and stops the moment a solution carries a feature outside the
/// current selection; that feature is appended and the solver restarts.
pub fn select_features(
    feats: &FeatureMatrix,
    labels: &LabelVector,
    n_target: usize,
    config: &SolverConfig,
) -> Result<SelectionState> {
    let total = feats.num_features();
    if n_target == 0 {
        return Err(SlddError::Config("n_target must be positive".into()));
    }
    if n_target > total {
        return Err(SlddError::Config(format!(
            "n_target {n_target} exceeds the {total} available features"
        )));
    }

    let mut state = SelectionState {
        selected: Vec::with_capacity(n_target),
        history: Vec::with_capacity(n_target),
    };

    while state.selected.len() < n_target {
        let selected_set = state.selected_set();
        let prox = ProxKind::Gated(selected_set.clone());
        let restart_index = state.selected.len();
        let mut entered: Option<RestartRecord> = None;

        drive_path(
            feats,
            labels,
            config,
            &prox,
            SELECT_LAMBDA_SCALE,
            |entry| {
                let newcomer = entry
                    .model
                    .used_features()
                    .into_iter()
                    .find(|l| !selected_set.contains(l));
                match newcomer {
                    Some(feature) => {
                        let norm =
                            crate::prox::column_norm(entry.model.weights().column(feature));
                        entered = Some(RestartRecord {
                            restart_index,
                            added_feature: feature,
                            lambda_at_entry: entry.lambda,
                            column_norm: norm,
                        });
                        PathStep::Stop
                    }
                    None => PathStep::Continue,
                }
            },
        )?;

        match entered {
            Some(record) => {
                state.selected.push(record.added_feature);
                state.history.push(record);
            }
            None => {
                return Err(SlddError::SelectionStalled {
                    selected: state.selected.len(),
                })
            }
        }
    }
    Ok(state)
}
