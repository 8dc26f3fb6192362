//! Synthetic phantoms and a linear stand-in for the detector backbone.
//!
//! Volumes are Gaussian background noise with bright ellipsoidal lesions.
//! Benign lesions are smooth ellipsoids with homogeneous interior; malignant
//! ones get a lobulated boundary and heterogeneous interior so the two
//! classes are separable from local intensity statistics.

mod features;
mod scorer;
mod train;
mod volume;

pub use features::{extract_features, AnchorFeatures, FeatureExtractor, FEATURE_DIM};
pub use scorer::{ScorerOutput, ToyScorer};
pub use train::{
    detect_volume, evaluate_toy, feature_statistics, fuse_classification, lesion_classification_scores,
    mean_positive_cosine, patch_detections, prepare_dataset, train_toy, EvalConfig, PreparedVolume,
    StepLoss, ToyEvaluation, TrainConfig, TrainOutcome,
};
pub use volume::{Volume, MAGIC as VOLUME_MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assignment::{Category, GroundTruth};
use crate::error::{Error, Result};
use crate::geometry::{AnchorSpec, Box3, Shape3};
use crate::inference::{volume_bounds_from_cm3, PipelineConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub volume_shape: Shape3,
    pub voxel_spacing: [f64; 3],
    /// Inclusive range of lesion counts.
    pub lesions_per_volume: [usize; 2],
    /// Range of lesion diameters per axis, voxels.
    pub lesion_size_range: [f64; 2],
    pub malignant_fraction: f64,
    pub background_mean: f64,
    pub lesion_mean: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            volume_shape: [80, 24, 80],
            voxel_spacing: [1.0, 1.0, 1.0],
            lesions_per_volume: [1, 2],
            lesion_size_range: [8.0, 16.0],
            malignant_fraction: 0.5,
            background_mean: 0.2,
            lesion_mean: 0.8,
            noise_std: 0.08,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.volume_shape.contains(&0) {
            return Err(Error::config("volume_shape components must be >= 1"));
        }
        if self.lesions_per_volume[0] > self.lesions_per_volume[1] {
            return Err(Error::config("lesions_per_volume must be [min, max] with min <= max"));
        }
        let [lo, hi] = self.lesion_size_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::config("lesion_size_range must be [min, max] with 0 < min <= max"));
        }
        if !(0.0..=1.0).contains(&self.malignant_fraction) {
            return Err(Error::config("malignant_fraction must lie in [0, 1]"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std must be >= 0"));
        }
        if self.voxel_spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("voxel_spacing must be positive"));
        }
        Ok(())
    }

    /// Seed of the `index`-th volume of a dataset generated from this spec.
    pub fn volume_seed(&self, index: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index as u64)
            .rotate_left(17)
    }
}

/// Anchors for desk-scale volumes: three sizes on an 8-voxel grid.
pub fn desk_anchor_spec() -> AnchorSpec {
    AnchorSpec {
        basic_sizes: vec![6.0, 10.0, 16.0],
        stride: [8, 8, 8],
    }
}

/// Four 64×24×64 patches over an 80×24×80 volume, with size bounds of
/// 0.05 cm³ and 30 cm³ at 1 mm spacing.
pub fn desk_pipeline_config() -> PipelineConfig {
    let (min_volume, max_volume) = volume_bounds_from_cm3(0.05, 30.0, [1.0; 3]);
    PipelineConfig {
        patch_shape: [64, 24, 64],
        per_patch_top_k: 3,
        nms_iou_threshold: 0.1,
        min_volume,
        max_volume,
    }
}

struct Blob {
    center: [f64; 3],
    radii: [f64; 3],
    category: Category,
    /// Lobulation phases for malignant boundaries.
    phase: [f64; 2],
}

impl Blob {
    fn contains(&self, p: [f64; 3]) -> bool {
        let u = [0, 1, 2].map(|k| (p[k] - self.center[k]) / self.radii[k]);
        let rho2 = u[0] * u[0] + u[1] * u[1] + u[2] * u[2];
        match self.category {
            Category::Benign => rho2 <= 1.0,
            Category::Malignant => {
                let rho = rho2.sqrt();
                if rho < 1e-12 {
                    return true;
                }
                let theta = u[1].atan2(u[0]);
                let phi = (u[2] / rho).acos();
                let lobes = (5.0 * theta + self.phase[0]).sin() * (4.0 * phi + self.phase[1]).sin();
                rho <= 1.0 - 0.3 * lobes.abs()
            }
        }
    }
}

/// Generates one phantom volume and its lesion boxes.
///
/// Each lesion's box is the tight bounding box of its rasterized voxels.
pub fn generate_volume(spec: &SyntheticSpec, seed: u64) -> Result<(Volume, Vec<GroundTruth>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = spec.volume_shape;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Generation(e.to_string()))?;

    let mut vol = Volume::filled(shape, spec.voxel_spacing, seed, 0.0);
    for v in vol.data.iter_mut() {
        *v = (spec.background_mean + noise.sample(&mut rng)) as f32;
    }

    let [lo_n, hi_n] = spec.lesions_per_volume;
    let count = rng.random_range(lo_n..=hi_n);
    let [smin, smax] = spec.lesion_size_range;
    let mut blobs: Vec<Blob> = Vec::with_capacity(count);
    for n in 0..count {
        let category = if rng.random_bool(spec.malignant_fraction) {
            Category::Malignant
        } else {
            Category::Benign
        };
        let size = [0; 3].map(|_| rng.random_range(smin..=smax));
        if (0..3).any(|k| size[k] + 2.0 > shape[k] as f64) {
            return Err(Error::Generation(format!(
                "lesion of size {size:?} does not fit volume {shape:?}"
            )));
        }
        let phase = [rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU)];
        let mut placed = false;
        for _ in 0..200 {
            let center = [0, 1, 2].map(|k| {
                let half = 0.5 * size[k] + 1.0;
                rng.random_range(half..=shape[k] as f64 - half)
            });
            let apart = blobs.iter().all(|b| {
                (0..3).any(|k| (center[k] - b.center[k]).abs() >= 0.5 * size[k] + b.radii[k] + 2.0)
            });
            if apart {
                blobs.push(Blob {
                    center,
                    radii: size.map(|s| 0.5 * s),
                    category,
                    phase,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!("no room for lesion {n} after 200 attempts")));
        }
    }

    let mut gts = Vec::with_capacity(blobs.len());
    for blob in &blobs {
        let lo = [0, 1, 2].map(|k| ((blob.center[k] - blob.radii[k]).floor().max(0.0)) as usize);
        let hi = [0, 1, 2].map(|k| ((blob.center[k] + blob.radii[k]).ceil() as usize).min(shape[k]));
        let mut tight_lo = [usize::MAX; 3];
        let mut tight_hi = [0usize; 3];
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                    if !blob.contains(p) {
                        continue;
                    }
                    let jitter = noise.sample(&mut rng);
                    let value = match blob.category {
                        Category::Benign => spec.lesion_mean + jitter,
                        Category::Malignant => 0.9 * spec.lesion_mean + 2.5 * jitter,
                    };
                    let i = vol.index(x, y, z);
                    vol.data[i] = value as f32;
                    for (k, c) in [x, y, z].into_iter().enumerate() {
                        tight_lo[k] = tight_lo[k].min(c);
                        tight_hi[k] = tight_hi[k].max(c + 1);
                    }
                }
            }
        }
        if tight_lo[0] == usize::MAX {
            return Err(Error::Generation("lesion rasterized to zero voxels".into()));
        }
        let bbox = Box3::from_corners(tight_lo.map(|v| v as f64), tight_hi.map(|v| v as f64))?;
        gts.push(GroundTruth::new(bbox, blob.category));
    }
    Ok((vol, gts))
}

/// `count` volumes with per-volume seeds derived from `spec.seed`.
pub fn generate_dataset(spec: &SyntheticSpec, count: usize) -> Result<Vec<(Volume, Vec<GroundTruth>)>> {
    (0..count).map(|i| generate_volume(spec, spec.volume_seed(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_volume_is_pure_noise() {
        let spec = SyntheticSpec {
            lesions_per_volume: [0, 0],
            ..Default::default()
        };
        let (vol, gts) = generate_volume(&spec, 3).unwrap();
        assert!(gts.is_empty());
        let mean = vol.data.iter().map(|&v| v as f64).sum::<f64>() / vol.data.len() as f64;
        assert!((mean - spec.background_mean).abs() < 0.01);
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SyntheticSpec::default();
        let (a, ga) = generate_volume(&spec, 11).unwrap();
        let (b, gb) = generate_volume(&spec, 11).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ga, gb);
        let (c, _) = generate_volume(&spec, 12).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn benign_box_matches_diameter() {
        for seed in 0..20 {
            let spec = SyntheticSpec {
                lesions_per_volume: [1, 1],
                malignant_fraction: 0.0,
                lesion_size_range: [9.0, 9.0],
                ..Default::default()
            };
            let (_, gts) = generate_volume(&spec, seed).unwrap();
            for s in gts[0].bbox.size() {
                assert!((s - 9.0).abs() <= 1.0, "seed {seed}: size {s}");
            }
        }
    }

    #[test]
    fn oversized_lesion_fails() {
        let spec = SyntheticSpec {
            lesion_size_range: [30.0, 30.0],
            lesions_per_volume: [1, 1],
            ..Default::default()
        };
        assert!(matches!(generate_volume(&spec, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn lesions_do_not_overlap() {
        let spec = SyntheticSpec {
            lesions_per_volume: [3, 3],
            ..Default::default()
        };
        for seed in 0..10 {
            let (_, gts) = generate_volume(&spec, seed).unwrap();
            for i in 0..gts.len() {
                for j in i + 1..gts.len() {
                    assert_eq!(crate::geometry::iou3d(&gts[i].bbox, &gts[j].bbox), 0.0);
                }
            }
        }
    }
}
