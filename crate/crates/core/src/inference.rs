//! Test-time pipeline: regular patch tiling, per-patch NMS and top-k,
//! patch-to-volume translation, size filtering and a final NMS.

use serde::{Deserialize, Serialize};

use crate::assignment::GroundTruth;
use crate::error::{Error, Result};
use crate::geometry::{iou3d, Box3, Shape3};
use crate::losses::Embedding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: Box3,
    /// Foreground confidence in [0, 1].
    pub score: f64,
    /// (benign, malignant) probabilities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_probs: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Embedding>,
    /// Best IoU against the volume's lesions, once known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iou: Option<f64>,
}

impl Detection {
    pub fn new(bbox: Box3, score: f64) -> Self {
        Self {
            bbox,
            score,
            class_probs: None,
            embedding: None,
            max_iou: None,
        }
    }

    pub fn with_class_probs(mut self, probs: [f64; 2]) -> Self {
        self.class_probs = Some(probs);
        self
    }
}

/// Post-processing settings.
///
/// The default size bounds correspond to 0.05 cm³ and 30 cm³ at the
/// 2× down-sampled clinical spacing (1.022, 0.164, 0.400) mm, i.e. a raw
/// 800×200×800 scan reduced to 400×100×400 (1/8 of the voxels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub patch_shape: Shape3,
    pub per_patch_top_k: usize,
    pub nms_iou_threshold: f64,
    /// Smallest kept box volume, in voxels.
    pub min_volume: f64,
    /// Largest kept box volume, in voxels.
    pub max_volume: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let (min_volume, max_volume) = volume_bounds_from_cm3(0.05, 30.0, [1.022, 0.164, 0.400]);
        Self {
            patch_shape: [320, 96, 320],
            per_patch_top_k: 3,
            nms_iou_threshold: 0.1,
            min_volume,
            max_volume,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_shape.contains(&0) {
            return Err(Error::config("patch_shape components must be >= 1"));
        }
        if self.per_patch_top_k == 0 {
            return Err(Error::config("per_patch_top_k must be >= 1"));
        }
        if !(self.nms_iou_threshold > 0.0 && self.nms_iou_threshold < 1.0) {
            return Err(Error::config(format!(
                "nms_iou_threshold must lie in (0, 1), got {}",
                self.nms_iou_threshold
            )));
        }
        if !(self.min_volume >= 0.0 && self.min_volume < self.max_volume) {
            return Err(Error::config(format!(
                "need 0 <= min_volume ({}) < max_volume ({})",
                self.min_volume, self.max_volume
            )));
        }
        Ok(())
    }
}

/// Converts physical volume bounds (cm³) to voxel-count bounds.
pub fn volume_bounds_from_cm3(min_cm3: f64, max_cm3: f64, spacing_mm: [f64; 3]) -> (f64, f64) {
    let voxel_cm3 = spacing_mm.iter().product::<f64>() / 1000.0;
    (min_cm3 / voxel_cm3, max_cm3 / voxel_cm3)
}

/// Patch origins of a regular crop.
///
/// Along x and z, `ceil(volume / patch)` windows are spread evenly from 0 to
/// `volume - patch`. The y (depth) axis always gets a single centered window.
/// Origins are listed x fastest, then z.
pub fn tile_volume(volume_shape: Shape3, patch_shape: Shape3) -> Result<Vec<Shape3>> {
    if patch_shape.contains(&0) {
        return Err(Error::config("patch_shape components must be >= 1"));
    }
    if (0..3).any(|k| patch_shape[k] > volume_shape[k]) {
        return Err(Error::config(format!(
            "patch {patch_shape:?} does not fit in volume {volume_shape:?}"
        )));
    }
    let spread = |k: usize| -> Vec<usize> {
        let (s, p) = (volume_shape[k], patch_shape[k]);
        let n = s.div_ceil(p);
        if n <= 1 {
            return vec![0];
        }
        let slack = (s - p) as f64;
        (0..n)
            .map(|i| (slack * i as f64 / (n - 1) as f64).round() as usize)
            .collect()
    };
    let xs = spread(0);
    let y = (volume_shape[1] - patch_shape[1]) / 2;
    let zs = spread(2);
    let mut origins = Vec::with_capacity(xs.len() * zs.len());
    for &z in &zs {
        for &x in &xs {
            origins.push([x, y, z]);
        }
    }
    Ok(origins)
}

/// Moves a patch-local detection into volume coordinates.
pub fn patch_to_volume(det: &Detection, origin: Shape3) -> Detection {
    Detection {
        bbox: det.bbox.translated(origin.map(|o| o as f64)),
        ..det.clone()
    }
}

/// Greedy non-maximum suppression.
///
/// Repeatedly keeps the best remaining detection and drops every remaining
/// one whose IoU with it exceeds `iou_threshold`. Equal scores keep input order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for (n, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(dets[i].clone());
        for &j in &order[n + 1..] {
            if !suppressed[j] && iou3d(&dets[i].bbox, &dets[j].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// Keeps detections with `min_volume <= w*h*d <= max_volume`. Degenerate boxes never pass.
pub fn size_filter(dets: &[Detection], min_volume: f64, max_volume: f64) -> Vec<Detection> {
    dets.iter()
        .filter(|d| {
            let v = d.bbox.volume();
            !d.bbox.is_degenerate() && v >= min_volume && v <= max_volume
        })
        .cloned()
        .collect()
}

/// Best IoU of `bbox` against any lesion, 0 when there are none.
pub fn max_iou(bbox: &Box3, gts: &[GroundTruth]) -> f64 {
    gts.iter().map(|g| iou3d(bbox, &g.bbox)).fold(0.0, f64::max)
}

/// Per patch: NMS, keep top-k, translate. Then pool, size-filter, final NMS,
/// and annotate each survivor with its max IoU when lesions are supplied.
pub fn run_inference(
    per_patch: &[(Shape3, Vec<Detection>)],
    config: &PipelineConfig,
    gts: Option<&[GroundTruth]>,
) -> Result<Vec<Detection>> {
    config.validate()?;
    let mut pooled = Vec::new();
    for (origin, dets) in per_patch {
        let kept = nms(dets, config.nms_iou_threshold);
        pooled.extend(
            kept.iter()
                .take(config.per_patch_top_k)
                .map(|d| patch_to_volume(d, *origin)),
        );
    }
    let filtered = size_filter(&pooled, config.min_volume, config.max_volume);
    let mut finals = nms(&filtered, config.nms_iou_threshold);
    if let Some(gts) = gts {
        for d in &mut finals {
            d.max_iou = Some(max_iou(&d.bbox, gts));
        }
    }
    Ok(finals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::Category;

    fn det(c: [f64; 3], s: f64, score: f64) -> Detection {
        Detection::new(Box3::new(c, [s; 3]).unwrap(), score)
    }

    fn cfg() -> PipelineConfig {
        PipelineConfig {
            patch_shape: [40, 12, 40],
            per_patch_top_k: 3,
            nms_iou_threshold: 0.1,
            min_volume: 0.0,
            max_volume: f64::INFINITY,
        }
    }

    #[test]
    fn four_patches_on_clinical_geometry() {
        let o = tile_volume([400, 100, 400], [320, 96, 320]).unwrap();
        assert_eq!(o, vec![[0, 2, 0], [80, 2, 0], [0, 2, 80], [80, 2, 80]]);
        let o = tile_volume([400, 96, 400], [320, 96, 320]).unwrap();
        assert_eq!(o.len(), 4);
        assert!(o.iter().all(|p| p[1] == 0));
        assert_eq!(tile_volume([7, 8, 9], [7, 8, 9]).unwrap(), vec![[0, 0, 0]]);
        assert!(tile_volume([10, 10, 10], [11, 10, 10]).is_err());
    }

    #[test]
    fn tiles_cover_wide_axes() {
        let o = tile_volume([100, 10, 10], [30, 10, 10]).unwrap();
        let xs: Vec<usize> = o.iter().map(|p| p[0]).collect();
        assert_eq!(xs, vec![0, 23, 47, 70]);
    }

    #[test]
    fn translation() {
        let d = det([10.0; 3], 4.0, 0.5);
        assert_eq!(patch_to_volume(&d, [0, 0, 0]), d);
        let moved = patch_to_volume(&d, [80, 2, 80]);
        assert_eq!(moved.bbox.center(), [90.0, 12.0, 90.0]);
        assert_eq!(moved.bbox.size(), d.bbox.size());
        let back = moved.bbox.translated([-80.0, -2.0, -80.0]);
        assert_eq!(back, d.bbox);
    }

    #[test]
    fn nms_basics() {
        assert!(nms(&[], 0.5).is_empty());
        let one = [det([0.0; 3], 2.0, 0.3)];
        assert_eq!(nms(&one, 0.5), one.to_vec());
        let dup = [det([0.0; 3], 2.0, 0.8), det([0.0; 3], 2.0, 0.9)];
        let kept = nms(&dup, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_ties_keep_input_order() {
        let a = det([0.0; 3], 2.0, 0.5);
        let b = det([10.0; 3], 2.0, 0.5);
        assert_eq!(nms(&[a.clone(), b.clone()], 0.5), vec![a.clone(), b.clone()]);
        assert_eq!(nms(&[b.clone(), a.clone()], 0.5), vec![b, a]);
    }

    #[test]
    fn size_filter_cases() {
        let big = det([0.0; 3], 10.0, 0.5);
        let small = det([0.0; 3], 2.0, 0.5);
        assert_eq!(size_filter(&[big.clone(), small.clone()], 500.0, 10000.0), vec![big.clone()]);
        let all = [small.clone(), big.clone()];
        assert_eq!(size_filter(&all, 0.0, f64::INFINITY), all.to_vec());
        let mut flat = big.clone();
        flat.bbox.w = 0.0;
        assert!(size_filter(&[flat], 0.0, f64::INFINITY).is_empty());
    }

    #[test]
    fn top_k_per_patch() {
        let dets: Vec<Detection> = (0..5)
            .map(|i| det([10.0 * i as f64, 5.0, 5.0], 3.0, 0.1 * (i + 1) as f64))
            .collect();
        let out = run_inference(&[([0, 0, 0], dets)], &cfg(), None).unwrap();
        let scores: Vec<f64> = out.iter().map(|d| d.score).collect();
        assert_eq!(scores, vec![0.5, 0.4, 0.30000000000000004]);
    }

    #[test]
    fn duplicate_across_patches_is_merged() {
        // Same volume-space box seen from two overlapping patches.
        let a = det([30.0, 6.0, 30.0], 6.0, 0.9);
        let b = det([20.0, 6.0, 30.0], 6.0, 0.8);
        let out = run_inference(
            &[([0, 0, 0], vec![a]), ([10, 0, 0], vec![b])],
            &cfg(),
            None,
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
        assert!(run_inference(&[], &cfg(), None).unwrap().is_empty());
    }

    #[test]
    fn annotates_max_iou() {
        let gt = GroundTruth::new(Box3::new([5.0; 3], [2.0; 3]).unwrap(), Category::Benign);
        let dets = vec![det([5.0; 3], 2.0, 0.9), det([50.0; 3], 2.0, 0.5)];
        let out = run_inference(&[([0, 0, 0], dets)], &cfg(), Some(&[gt])).unwrap();
        assert_eq!(out[0].max_iou, Some(1.0));
        assert_eq!(out[1].max_iou, Some(0.0));
    }

    #[test]
    fn default_size_bounds() {
        let c = PipelineConfig::default();
        assert!((c.min_volume - 745.8).abs() < 0.1);
        assert!((c.max_volume - 447_472.7).abs() < 0.1);
        c.validate().unwrap();
    }
}
