//! Masking-based feature localization: blur one patch at a time, measure
//! how much the pooled feature value drops (increases are suppressed, blur
//! should not inject a feature), max-normalize each patch-size map and sum
//! them on the finest grid.

use ndarray::{Array1, Array2, Array3, Array4, Axis};

use crate::error::{Result, SlddError};
use crate::finetune::ToyExtractor;
use crate::tensor::{pool_maps, FeatureMapBatch};

/// A deterministic feature extractor: channels×H×W input grid to a pooled
/// feature vector. Implementations must be safe to call repeatedly with
/// perturbed inputs.
pub trait Extractor {
    fn features(&self, input: &Array3<f64>) -> Result<Array1<f64>>;
    fn num_features(&self) -> usize;
}

/// Patch sizes and per-size gaussian blur strengths.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSchedule {
    pub sizes: Vec<usize>,
    /// One σ per size, in pixels.
    pub blur_std: Vec<f64>,
}

impl PatchSchedule {
    /// σ = p/4 per size.
    pub fn for_sizes(sizes: Vec<usize>) -> Self {
        let blur_std = sizes.iter().map(|&p| p as f64 / 4.0).collect();
        PatchSchedule { sizes, blur_std }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(SlddError::Config("patch schedule needs sizes".into()));
        }
        if self.sizes.iter().any(|&p| p == 0) {
            return Err(SlddError::Config("patch sizes must be positive".into()));
        }
        if self.blur_std.len() != self.sizes.len() {
            return Err(SlddError::Config(
                "one blur std per patch size is required".into(),
            ));
        }
        Ok(())
    }

    /// Sizes clipped to the input edge and deduplicated, with their σ.
    fn clipped(&self, edge: usize) -> Vec<(usize, f64)> {
        let mut seen = std::collections::BTreeSet::new();
        let mut out = Vec::new();
        for (&p, &sigma) in self.sizes.iter().zip(&self.blur_std) {
            let clipped = p.min(edge);
            if seen.insert(clipped) {
                out.push((clipped, sigma.min(clipped as f64)));
            }
        }
        out
    }
}

impl Default for PatchSchedule {
    fn default() -> Self {
        PatchSchedule::for_sizes(vec![28, 56, 64, 112, 224])
    }
}

/// One normalized per-size response grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSizeMap {
    pub size: usize,
    pub values: Array2<f64>,
}

/// Combined localization map on the finest patch grid, plus the
/// contributing per-size maps (each max-normalized to 1 or identically
/// zero).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    pub values: Array2<f64>,
    pub per_size: Vec<PerSizeMap>,
}

fn reflect_index(idx: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = idx;
    // reflect without repeating the border sample until inside
    loop {
        if i < 0 {
            i = -i;
        } else if i >= len {
            i = 2 * len - 2 - i;
        } else {
            return i as usize;
        }
        if len == 1 {
            return 0;
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (2.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    kernel.iter().map(|v| v / sum).collect()
}

/// Separable gaussian blur with reflective padding, all channels.
pub fn gaussian_blur(input: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let (channels, h, w) = input.dim();
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut horizontal = Array3::zeros((channels, h, w));
    for ch in 0..channels {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &weight) in kernel.iter().enumerate() {
                    let sx = reflect_index(x as isize + k as isize - radius, w);
                    acc += weight * input[(ch, y, sx)];
                }
                horizontal[(ch, y, x)] = acc;
            }
        }
    }
    let mut out = Array3::zeros((channels, h, w));
    for ch in 0..channels {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &weight) in kernel.iter().enumerate() {
                    let sy = reflect_index(y as isize + k as isize - radius, h);
                    acc += weight * horizontal[(ch, sy, x)];
                }
                out[(ch, y, x)] = acc;
            }
        }
    }
    out
}

/// Grid row/col start offsets for patch size p over an extent: stride p,
/// with a final patch clamped to the border when p does not divide the
/// extent.
fn patch_starts(extent: usize, p: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut pos = 0;
    while pos + p <= extent {
        starts.push(pos);
        pos += p;
    }
    if extent % p != 0 && extent >= p {
        starts.push(extent - p);
    }
    starts
}

/// Localizes one feature by patchwise blurring. For every size p and grid
/// cell, the patch starting at (x·p, y·p) is replaced by its blurred
/// version; the response is max(0, f(I) − f(I_pxy)). Per-size maps are
/// divided by their max (skipped when identically zero), resized to the
/// finest grid by nearest-neighbor replication, and summed.
pub fn localize_feature(
    extractor: &dyn Extractor,
    input: &Array3<f64>,
    feature_index: usize,
    schedule: &PatchSchedule,
) -> Result<LocalizationMap> {
    schedule.validate()?;
    if feature_index >= extractor.num_features() {
        return Err(SlddError::Config(format!(
            "feature index {feature_index} out of range for {} features",
            extractor.num_features()
        )));
    }
    let (_, h, w) = input.dim();
    let edge = h.min(w);
    let sizes = schedule.clipped(edge);

    let baseline = extractor.features(input)?;
    let base_value = baseline[feature_index];
    if !base_value.is_finite() {
        return Err(SlddError::ExtractorNonFinite { x: 0, y: 0, size: 0 });
    }

    let mut per_size = Vec::with_capacity(sizes.len());
    for &(p, sigma) in &sizes {
        let blurred = gaussian_blur(input, sigma);
        let ys = patch_starts(h, p);
        let xs = patch_starts(w, p);
        let mut map = Array2::zeros((ys.len(), xs.len()));
        for (gy, &y0) in ys.iter().enumerate() {
            for (gx, &x0) in xs.iter().enumerate() {
                let mut masked = input.clone();
                masked
                    .slice_mut(ndarray::s![.., y0..y0 + p, x0..x0 + p])
                    .assign(&blurred.slice(ndarray::s![.., y0..y0 + p, x0..x0 + p]));
                let value = extractor.features(&masked)?[feature_index];
                if !value.is_finite() {
                    return Err(SlddError::ExtractorNonFinite {
                        x: gx,
                        y: gy,
                        size: p,
                    });
                }
                map[(gy, gx)] = (base_value - value).max(0.0);
            }
        }
        let max = map.iter().cloned().fold(0.0f64, f64::max);
        if max > 0.0 {
            map.mapv_inplace(|v| v / max);
        }
        per_size.push(PerSizeMap { size: p, values: map });
    }

    // finest grid = smallest patch size (largest cell count)
    let finest = per_size
        .iter()
        .min_by_key(|m| m.size)
        .expect("schedule is nonempty");
    let (fine_h, fine_w) = finest.values.dim();
    let fine_p = finest.size;
    let mut combined = Array2::zeros((fine_h, fine_w));
    for entry in &per_size {
        let (ny, nx) = entry.values.dim();
        for gy in 0..fine_h {
            for gx in 0..fine_w {
                let cy = ((gy * fine_p) / entry.size).min(ny - 1);
                let cx = ((gx * fine_p) / entry.size).min(nx - 1);
                combined[(gy, gx)] += entry.values[(cy, cx)];
            }
        }
    }

    Ok(LocalizationMap {
        values: combined,
        per_size,
    })
}

/// Analytic extractor for tests and demos: each feature is the mean of one
/// rectangular region of one channel.
#[derive(Debug, Clone)]
pub struct RegionMeanExtractor {
    pub regions: Vec<RegionSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionSpec {
    pub channel: usize,
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

impl Extractor for RegionMeanExtractor {
    fn features(&self, input: &Array3<f64>) -> Result<Array1<f64>> {
        let mut out = Array1::zeros(self.regions.len());
        for (j, region) in self.regions.iter().enumerate() {
            let slice = input.slice(ndarray::s![
                region.channel,
                region.y0..region.y0 + region.height,
                region.x0..region.x0 + region.width
            ]);
            out[j] = slice.sum() / (region.height * region.width) as f64;
        }
        Ok(out)
    }

    fn num_features(&self) -> usize {
        self.regions.len()
    }
}

/// Constant extractor; every localization map it produces is zero.
#[derive(Debug, Clone)]
pub struct ConstantExtractor {
    pub value: f64,
    pub features: usize,
}

impl Extractor for ConstantExtractor {
    fn features(&self, _input: &Array3<f64>) -> Result<Array1<f64>> {
        Ok(Array1::from_elem(self.features, self.value))
    }

    fn num_features(&self) -> usize {
        self.features
    }
}

/// Adapter: a trained toy extractor viewed as image-like grid -> pooled
/// features, so pipeline features can be localized.
pub struct ToyMapExtractor {
    pub extractor: ToyExtractor,
}

impl Extractor for ToyMapExtractor {
    fn features(&self, input: &Array3<f64>) -> Result<Array1<f64>> {
        let (f, h, w) = input.dim();
        let mut batch = Array4::zeros((1, f, h, w));
        batch.index_axis_mut(Axis(0), 0).assign(input);
        let maps = self.extractor.forward(&FeatureMapBatch::new(batch)?)?;
        let pooled = pool_maps(&maps);
        Ok(pooled.values().row(0).to_owned())
    }

    fn num_features(&self) -> usize {
        self.extractor.num_features()
    }
}

/// External extractor spoken to over a pipe: the input grid goes to stdin
/// as a single-example FMP1 tensor, the feature vector comes back on stdout
/// as a 1×F FMX1 matrix.
pub struct SubprocessExtractor {
    pub program: String,
    pub args: Vec<String>,
    pub num_features: usize,
}

impl Extractor for SubprocessExtractor {
    fn features(&self, input: &Array3<f64>) -> Result<Array1<f64>> {
        use std::process::{Command, Stdio};
        let (f, h, w) = input.dim();
        let mut batch = Array4::zeros((1, f, h, w));
        batch.index_axis_mut(Axis(0), 0).assign(input);
        let maps = FeatureMapBatch::new(batch)?;

        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            crate::io::write_feature_maps_to(&mut stdin, &maps)?;
        }
        let output = child.wait_with_output()?;
        if !output.status.success() {
            return Err(SlddError::Config(format!(
                "extractor subprocess failed with {}",
                output.status
            )));
        }
        let matrix = crate::io::read_feature_matrix_from(&mut output.stdout.as_slice())?;
        if matrix.num_examples() != 1 || matrix.num_features() != self.num_features {
            return Err(SlddError::DimensionMismatch {
                context: "subprocess extractor".into(),
                expected: format!("1x{} matrix", self.num_features),
                got: format!("{}x{}", matrix.num_examples(), matrix.num_features()),
            });
        }
        Ok(matrix.values().row(0).to_owned())
    }

    fn num_features(&self) -> usize {
        self.num_features
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn bright_spot_input(h: usize, w: usize, y: usize, x: usize) -> Array3<f64> {
        let mut input = Array3::zeros((1, h, w));
        input[(0, y, x)] = 10.0;
        input
    }

    #[test]
    fn response_lands_in_the_sensitive_patch() {
        // feature = mean of the block holding the bright spot; blurring any
        // other patch leaves it untouched. The spot sits at (3,3) so blur
        // leaks its mass across the block border instead of reflecting it
        // back in.
        let input = bright_spot_input(12, 12, 3, 3);
        let extractor = RegionMeanExtractor {
            regions: vec![RegionSpec {
                channel: 0,
                y0: 0,
                x0: 0,
                height: 4,
                width: 4,
            }],
        };
        let schedule = PatchSchedule::for_sizes(vec![4]);
        let map = localize_feature(&extractor, &input, 0, &schedule).unwrap();
        assert_eq!(map.values.dim(), (3, 3));
        assert!(map.values[(0, 0)] > 0.0, "sensitive cell responds");
        for ((gy, gx), &v) in map.values.indexed_iter() {
            if (gy, gx) != (0, 0) {
                assert_eq!(v, 0.0, "cell ({gy}, {gx}) must stay zero");
            }
        }
    }

    #[test]
    fn constant_extractor_yields_zero_map() {
        let input = bright_spot_input(8, 8, 3, 3);
        let extractor = ConstantExtractor {
            value: 2.5,
            features: 2,
        };
        let schedule = PatchSchedule::for_sizes(vec![4]);
        let map = localize_feature(&extractor, &input, 1, &schedule).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn increases_are_suppressed_by_the_relu() {
        // negated region mean: blurring the bright region spreads mass out,
        // the negated mean rises, and the ReLU clamps every response
        struct Negated(RegionMeanExtractor);
        impl Extractor for Negated {
            fn features(&self, input: &Array3<f64>) -> Result<Array1<f64>> {
                Ok(self.0.features(input)?.mapv(|v| -v))
            }
            fn num_features(&self) -> usize {
                self.0.num_features()
            }
        }
        let input = bright_spot_input(8, 8, 3, 3);
        let extractor = Negated(RegionMeanExtractor {
            regions: vec![RegionSpec {
                channel: 0,
                y0: 0,
                x0: 0,
                height: 4,
                width: 4,
            }],
        });
        let schedule = PatchSchedule::for_sizes(vec![4]);
        let map = localize_feature(&extractor, &input, 0, &schedule).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn per_size_maps_are_normalized_or_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let input = Array3::from_shape_fn((2, 12, 12), |_| rng.gen_range(0.0..1.0));
        let extractor = RegionMeanExtractor {
            regions: vec![
                RegionSpec {
                    channel: 0,
                    y0: 2,
                    x0: 2,
                    height: 5,
                    width: 5,
                },
                RegionSpec {
                    channel: 1,
                    y0: 0,
                    x0: 6,
                    height: 3,
                    width: 3,
                },
            ],
        };
        let schedule = PatchSchedule::for_sizes(vec![3, 4, 6]);
        let map = localize_feature(&extractor, &input, 0, &schedule).unwrap();
        assert!(map.values.iter().all(|&v| v >= 0.0));
        for per in &map.per_size {
            let max = per.values.iter().cloned().fold(0.0f64, f64::max);
            assert!(
                max == 0.0 || (max - 1.0).abs() <= 1e-12,
                "size {} max {max}",
                per.size
            );
        }
    }

    #[test]
    fn translating_the_region_by_p_shifts_the_response_cell() {
        let p = 4;
        let extractor_at = |x0: usize| RegionMeanExtractor {
            regions: vec![RegionSpec {
                channel: 0,
                y0: 0,
                x0,
                height: p,
                width: p,
            }],
        };
        let schedule = PatchSchedule::for_sizes(vec![p]);
        // the spot sits at the region border so blurring leaks mass out
        let input_a = bright_spot_input(12, 12, 3, 3);
        let map_a = localize_feature(&extractor_at(0), &input_a, 0, &schedule).unwrap();
        let input_b = bright_spot_input(12, 12, 3, 3 + p);
        let map_b = localize_feature(&extractor_at(p), &input_b, 0, &schedule).unwrap();
        let peak = |m: &LocalizationMap| {
            m.values
                .indexed_iter()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(idx, _)| idx)
                .unwrap()
        };
        let (ay, ax) = peak(&map_a);
        let (by, bx) = peak(&map_b);
        assert_eq!(ay, by);
        assert_eq!(bx, ax + 1, "one grid step along x");
    }

    #[test]
    fn oversized_patches_clip_to_the_input_edge() {
        let input = bright_spot_input(6, 6, 2, 2);
        let extractor = RegionMeanExtractor {
            regions: vec![RegionSpec {
                channel: 0,
                y0: 0,
                x0: 0,
                height: 6,
                width: 6,
            }],
        };
        let schedule = PatchSchedule::for_sizes(vec![3, 64]);
        let map = localize_feature(&extractor, &input, 0, &schedule).unwrap();
        let sizes: Vec<usize> = map.per_size.iter().map(|m| m.size).collect();
        assert_eq!(sizes, vec![3, 6]);
    }

    #[test]
    fn edge_remainder_gets_a_clamped_patch() {
        assert_eq!(patch_starts(10, 4), vec![0, 4, 6]);
        assert_eq!(patch_starts(8, 4), vec![0, 4]);
        assert_eq!(patch_starts(3, 4), Vec::<usize>::new());
    }

    #[test]
    fn blur_preserves_constants_and_mass_locality() {
        let input = Array3::from_elem((1, 7, 7), 3.25);
        let blurred = gaussian_blur(&input, 1.5);
        for &v in blurred.iter() {
            assert!((v - 3.25).abs() < 1e-12, "blur of constant is constant");
        }
        let spot = bright_spot_input(9, 9, 4, 4);
        let blurred = gaussian_blur(&spot, 1.0);
        assert!(blurred[(0, 4, 4)] < 10.0);
        assert!(blurred[(0, 4, 5)] > 0.0);
        // an interior spot never touches the reflected border, so its mass
        // is conserved
        let total_in: f64 = spot.iter().sum();
        let total_out: f64 = blurred.iter().sum();
        assert!((total_in - total_out).abs() < 1e-9);
    }

    #[test]
    fn toy_extractor_adapter_pools_forwarded_maps() {
        let toy = ToyExtractor::identity(3, 4, 4);
        let adapter = ToyMapExtractor { extractor: toy };
        let mut input = Array3::zeros((3, 4, 4));
        input[(1, 0, 0)] = 16.0;
        let feats = adapter.features(&input).unwrap();
        assert_eq!(feats.len(), 3);
        assert!((feats[1] - 1.0).abs() < 1e-12);
        assert_eq!(feats[0], 0.0);
    }

    #[cfg(target_family = "unix")]
    #[test]
    fn subprocess_extractor_round_trips_the_protocol() {
        use crate::io::write_feature_matrix;
        use crate::tensor::FeatureMatrix;
        let dir = tempfile::tempdir().unwrap();
        let fixture = dir.path().join("reply.fmx");
        let reply =
            FeatureMatrix::new(Array2::from_shape_vec((1, 2), vec![0.5, -1.25]).unwrap()).unwrap();
        write_feature_matrix(&fixture, &reply).unwrap();
        let extractor = SubprocessExtractor {
            program: "sh".into(),
            args: vec![
                "-c".into(),
                format!("cat > /dev/null; cat {}", fixture.display()),
            ],
            num_features: 2,
        };
        let input = Array3::zeros((1, 3, 3));
        let feats = extractor.features(&input).unwrap();
        assert_eq!(feats.to_vec(), vec![0.5, -1.25]);
    }
}
