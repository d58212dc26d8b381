//! Synthetic benchmark generator: class-specific spatial bumps on a small
//! set of signal features, gaussian noise everywhere else, and an attribute
//! table optionally coupled 1:1 to the signal features. The planted
//! (class, feature) support is recorded so selection and sparsity stages
//! can be scored against ground truth.

use ndarray::Array4;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use crate::alignment::AttributeTable;
use crate::error::{Result, SlddError};
use crate::tensor::{FeatureMapBatch, LabelVector};

/// Plus-extended 3×3 blob: strong pooled signal with a compact footprint.
const BUMP_OFFSETS: [(i64, i64); 13] = [
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 0), (0, 1),
    (1, -1), (1, 0), (1, 1),
    (-2, 0), (2, 0), (0, -2), (0, 2),
];
const BUMP_RADIUS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub features: usize,
    /// Signal features per class; class sets are disjoint whenever
    /// classes·signal_per_class fits into the feature pool.
    pub signal_per_class: usize,
    pub map_h: usize,
    pub map_w: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub amp_mean: f64,
    pub amp_std: f64,
    pub noise_std: f64,
    pub attribute_coupling: bool,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The instance used throughout the demos and the test harness:
    /// 5 classes over 50 features, 3 signal features each, 7×7 maps.
    pub fn standard(seed: u64) -> Self {
        SyntheticSpec {
            classes: 5,
            features: 50,
            signal_per_class: 3,
            map_h: 7,
            map_w: 7,
            n_train: 500,
            n_test: 250,
            amp_mean: 2.0,
            amp_std: 0.25,
            noise_std: 0.25,
            attribute_coupling: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(SlddError::Config("need at least 2 classes".into()));
        }
        if self.signal_per_class == 0 || self.signal_per_class > self.features {
            return Err(SlddError::Config(
                "signal_per_class must be in 1..=features".into(),
            ));
        }
        if self.map_h < 2 * BUMP_RADIUS + 1 || self.map_w < 2 * BUMP_RADIUS + 1 {
            return Err(SlddError::Config(format!(
                "maps must be at least {0}x{0} to hold a bump",
                2 * BUMP_RADIUS + 1
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(SlddError::Config("need train and test examples".into()));
        }
        if self.amp_mean <= 0.0 || self.amp_std < 0.0 || self.noise_std < 0.0 {
            return Err(SlddError::Config("amplitudes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub train_maps: FeatureMapBatch,
    pub train_labels: LabelVector,
    pub test_maps: FeatureMapBatch,
    pub test_labels: LabelVector,
    /// Signal features per class, ascending within each class.
    pub class_signal_features: Vec<Vec<usize>>,
    /// Planted (class, feature) pairs.
    pub ground_truth_support: BTreeSet<(usize, usize)>,
    /// Bump center per (class, feature), interior cells only.
    pub bump_locations: Vec<(usize, usize, usize, usize)>,
    /// Present when attribute coupling is on; rows cover the training set.
    pub attributes: Option<AttributeTable>,
    /// Feature index behind each attribute column.
    pub attribute_features: Vec<usize>,
}

/// Generates the dataset. Every map cell draws Normal(0, noise_std); each
/// signal feature of the example's class additionally receives a 3×3 bump
/// of amplitude Normal(amp_mean, amp_std) truncated positive, centered at a
/// class-feature-specific interior cell.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std.max(1e-12)).expect("valid std");
    let amplitude = Normal::new(spec.amp_mean, spec.amp_std.max(1e-12)).expect("valid std");

    // signal assignment: disjoint chunks of a shuffled pool when they fit
    let mut pool: Vec<usize> = (0..spec.features).collect();
    let mut class_signal_features: Vec<Vec<usize>> = Vec::with_capacity(spec.classes);
    if spec.classes * spec.signal_per_class <= spec.features {
        for _ in 0..spec.classes {
            let mut chunk = Vec::with_capacity(spec.signal_per_class);
            for _ in 0..spec.signal_per_class {
                let pick = rng.gen_range(0..pool.len());
                chunk.push(pool.swap_remove(pick));
            }
            chunk.sort_unstable();
            class_signal_features.push(chunk);
        }
    } else {
        for _ in 0..spec.classes {
            let mut chunk = BTreeSet::new();
            while chunk.len() < spec.signal_per_class {
                chunk.insert(rng.gen_range(0..spec.features));
            }
            class_signal_features.push(chunk.into_iter().collect());
        }
    }

    // bump centers: interior cells (the whole blob stays on the map),
    // distinct within a class when possible
    let interior: Vec<(usize, usize)> = (BUMP_RADIUS..spec.map_h - BUMP_RADIUS)
        .flat_map(|y| (BUMP_RADIUS..spec.map_w - BUMP_RADIUS).map(move |x| (y, x)))
        .collect();
    let mut bump_locations = Vec::new();
    let mut center_of = std::collections::BTreeMap::new();
    for (class, signals) in class_signal_features.iter().enumerate() {
        let mut taken: Vec<(usize, usize)> = Vec::new();
        for &feature in signals {
            let available: Vec<(usize, usize)> = interior
                .iter()
                .filter(|cell| !taken.contains(cell))
                .copied()
                .collect();
            let cell = if available.is_empty() {
                interior[rng.gen_range(0..interior.len())]
            } else {
                available[rng.gen_range(0..available.len())]
            };
            taken.push(cell);
            bump_locations.push((class, feature, cell.0, cell.1));
            center_of.insert((class, feature), cell);
        }
    }

    let ground_truth_support: BTreeSet<(usize, usize)> = class_signal_features
        .iter()
        .enumerate()
        .flat_map(|(class, signals)| signals.iter().map(move |&l| (class, l)))
        .collect();

    let draw_split = |count: usize, rng: &mut ChaCha8Rng| -> Result<(FeatureMapBatch, LabelVector)> {
        let mut maps = Array4::zeros((count, spec.features, spec.map_h, spec.map_w));
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            // round-robin keeps classes balanced; the map draws stay random
            let class = i % spec.classes;
            labels.push(class);
            for l in 0..spec.features {
                for y in 0..spec.map_h {
                    for x in 0..spec.map_w {
                        maps[(i, l, y, x)] = noise.sample(rng);
                    }
                }
            }
            for &feature in &class_signal_features[class] {
                let (cy, cx) = center_of[&(class, feature)];
                let mut amp = amplitude.sample(rng);
                while amp <= 0.0 {
                    amp = amplitude.sample(rng);
                }
                for (dy, dx) in BUMP_OFFSETS {
                    let y = (cy as i64 + dy) as usize;
                    let x = (cx as i64 + dx) as usize;
                    maps[(i, feature, y, x)] += amp;
                }
            }
        }
        Ok((
            FeatureMapBatch::new(maps)?,
            LabelVector::new(labels, spec.classes)?,
        ))
    };

    let (train_maps, train_labels) = draw_split(spec.n_train, &mut rng)?;
    let (test_maps, test_labels) = draw_split(spec.n_test, &mut rng)?;

    let attribute_features: Vec<usize> = ground_truth_support
        .iter()
        .map(|&(_, l)| l)
        .collect::<BTreeSet<usize>>()
        .into_iter()
        .collect();
    let attributes = if spec.attribute_coupling {
        let names: Vec<String> = attribute_features
            .iter()
            .map(|l| format!("attr_feat_{l}"))
            .collect();
        let mut codes = ndarray::Array2::zeros((spec.n_train, attribute_features.len()));
        for (i, &class) in train_labels.labels().iter().enumerate() {
            for (a, &feature) in attribute_features.iter().enumerate() {
                if class_signal_features[class].contains(&feature) {
                    codes[(i, a)] = 3; // definitely
                }
            }
        }
        Some(AttributeTable::new(codes, names)?)
    } else {
        None
    };

    Ok(SyntheticDataset {
        spec: spec.clone(),
        train_maps,
        train_labels,
        test_maps,
        test_labels,
        class_signal_features,
        ground_truth_support,
        bump_locations,
        attributes,
        attribute_features,
    })
}
