//! Detection and classification evaluation.
//!
//! A detection is a false positive when it does not overlap any lesion at all
//! (IoU 0). A lesion is hit when some detection overlaps it by more than
//! [`MatchConfig::hit_iou_threshold`] (default 0, the complement of the
//! false-positive rule).

use serde::{Deserialize, Serialize};

use crate::assignment::{Category, GroundTruth};
use crate::error::{Error, Result};
use crate::geometry::iou3d;
use crate::inference::Detection;

/// Lesions and final detections of one volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeResult {
    pub volume_id: String,
    pub gts: Vec<GroundTruth>,
    pub detections: Vec<Detection>,
    /// Physical voxel size in mm, (x, y, z).
    pub voxel_spacing: [f64; 3],
}

impl VolumeResult {
    pub fn new(
        volume_id: impl Into<String>,
        gts: Vec<GroundTruth>,
        detections: Vec<Detection>,
        voxel_spacing: [f64; 3],
    ) -> Self {
        Self {
            volume_id: volume_id.into(),
            gts,
            detections,
            voxel_spacing,
        }
    }

    /// Lesion volume in cm³.
    pub fn lesion_cm3(&self, gt: &GroundTruth) -> f64 {
        gt.bbox.volume() * self.voxel_spacing.iter().product::<f64>() / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    /// A lesion counts as hit when a detection's IoU with it is strictly above this.
    pub hit_iou_threshold: f64,
    /// Average mIoU over all lesions with misses counted as 0, instead of over hits only.
    pub miou_counts_misses: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            hit_iou_threshold: 0.0,
            miou_counts_misses: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeMatch {
    /// Indices of lesions that were hit.
    pub hits: Vec<usize>,
    /// Indices of detections that overlap no lesion.
    pub false_positives: Vec<usize>,
    /// Best IoU on each hit lesion, aligned with `hits`.
    pub matched_ious: Vec<f64>,
    /// Detection with the highest IoU on each hit lesion, aligned with `hits`.
    pub best_detection: Vec<usize>,
}

pub fn match_volume(r: &VolumeResult, cfg: &MatchConfig) -> VolumeMatch {
    let mut hits = Vec::new();
    let mut matched_ious = Vec::new();
    let mut best_detection = Vec::new();
    let mut det_max = vec![0.0f64; r.detections.len()];
    for (gi, gt) in r.gts.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (di, d) in r.detections.iter().enumerate() {
            let v = iou3d(&d.bbox, &gt.bbox);
            det_max[di] = det_max[di].max(v);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((di, v));
            }
        }
        if let Some((di, v)) = best {
            if v > cfg.hit_iou_threshold {
                hits.push(gi);
                matched_ious.push(v);
                best_detection.push(di);
            }
        }
    }
    let false_positives = det_max
        .iter()
        .enumerate()
        .filter(|(_, &m)| m == 0.0)
        .map(|(i, _)| i)
        .collect();
    VolumeMatch {
        hits,
        false_positives,
        matched_ious,
        best_detection,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub category: Category,
    pub n_lesions: usize,
    pub n_hits: usize,
    pub sensitivity: Option<f64>,
    pub miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_volumes: usize,
    pub n_lesions: usize,
    pub n_hits: usize,
    pub n_false_positives: usize,
    pub sensitivity: f64,
    pub fps_per_volume: f64,
    /// Macro average over lesion categories of the mean matched IoU.
    pub miou: f64,
    pub per_class: Vec<ClassMetrics>,
}

impl MetricsReport {
    /// `mIoU(%) FPs Sensitivity(%)` as one table row.
    pub fn table_row(&self) -> String {
        format!(
            "{:.2} {:.2} {:.2}",
            100.0 * self.miou,
            self.fps_per_volume,
            100.0 * self.sensitivity
        )
    }
}

pub fn aggregate(results: &[VolumeResult], cfg: &MatchConfig) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(Error::domain("cannot aggregate an empty result set"));
    }
    let mut n_lesions = 0;
    let mut n_hits = 0;
    let mut n_fp = 0;
    // Per category: lesions, hits, sum of matched IoU.
    let mut per = [(0usize, 0usize, 0.0f64); 2];
    let slot = |c: Category| match c {
        Category::Benign => 0,
        Category::Malignant => 1,
    };
    for r in results {
        let m = match_volume(r, cfg);
        n_lesions += r.gts.len();
        n_hits += m.hits.len();
        n_fp += m.false_positives.len();
        for gt in &r.gts {
            per[slot(gt.category)].0 += 1;
        }
        for (&gi, &v) in m.hits.iter().zip(&m.matched_ious) {
            let p = &mut per[slot(r.gts[gi].category)];
            p.1 += 1;
            p.2 += v;
        }
    }
    if n_lesions == 0 {
        return Err(Error::domain("sensitivity is undefined without lesions"));
    }
    let per_class: Vec<ClassMetrics> = Category::ALL
        .iter()
        .map(|&c| {
            let (lesions, hits, iou_sum) = per[slot(c)];
            let denom = if cfg.miou_counts_misses { lesions } else { hits };
            ClassMetrics {
                category: c,
                n_lesions: lesions,
                n_hits: hits,
                sensitivity: (lesions > 0).then(|| hits as f64 / lesions as f64),
                miou: (lesions > 0).then(|| if denom == 0 { 0.0 } else { iou_sum / denom as f64 }),
            }
        })
        .collect();
    let class_mious: Vec<f64> = per_class.iter().filter_map(|c| c.miou).collect();
    Ok(MetricsReport {
        n_volumes: results.len(),
        n_lesions,
        n_hits,
        n_false_positives: n_fp,
        sensitivity: n_hits as f64 / n_lesions as f64,
        fps_per_volume: n_fp as f64 / results.len() as f64,
        miou: class_mious.iter().sum::<f64>() / class_mious.len() as f64,
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fps_per_volume: f64,
    pub sensitivity: f64,
}

/// Keeps detections scoring at least `threshold`.
pub fn filter_by_score(results: &[VolumeResult], threshold: f64) -> Vec<VolumeResult> {
    results
        .iter()
        .map(|r| VolumeResult {
            detections: r.detections.iter().filter(|d| d.score >= threshold).cloned().collect(),
            ..r.clone()
        })
        .collect()
}

/// One (FPs per volume, sensitivity) point per score threshold.
pub fn froc(results: &[VolumeResult], thresholds: &[f64], cfg: &MatchConfig) -> Result<Vec<FrocPoint>> {
    if thresholds.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::domain("FROC thresholds must be sorted ascending"));
    }
    thresholds
        .iter()
        .map(|&t| {
            let rep = aggregate(&filter_by_score(results, t), cfg)?;
            Ok(FrocPoint {
                threshold: t,
                fps_per_volume: rep.fps_per_volume,
                sensitivity: rep.sensitivity,
            })
        })
        .collect()
}

/// Best sensitivity among FROC points at or below the FP budget.
pub fn sensitivity_at_fps(points: &[FrocPoint], max_fps_per_volume: f64) -> Option<FrocPoint> {
    points
        .iter()
        .filter(|p| p.fps_per_volume <= max_fps_per_volume)
        .copied()
        .max_by(|a, b| a.sensitivity.total_cmp(&b.sensitivity))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeBin {
    /// Exclusive lower bound, cm³.
    pub lower_cm3: f64,
    /// Inclusive upper bound, cm³ (may be infinite).
    pub upper_cm3: f64,
    pub n_lesions: usize,
    pub n_hits: usize,
    /// `None` for an empty bin.
    pub sensitivity: Option<f64>,
}

/// Sensitivity per lesion-size bin `(e_i, e_{i+1}]`.
///
/// A leading 0 and a trailing +inf edge are implied when missing, so the
/// bins always partition all lesions.
pub fn size_stratified_sensitivity(
    results: &[VolumeResult],
    bin_edges_cm3: &[f64],
    cfg: &MatchConfig,
) -> Result<Vec<SizeBin>> {
    if bin_edges_cm3.iter().any(|e| e.is_nan() || *e < 0.0) {
        return Err(Error::domain("bin edges must be >= 0"));
    }
    if bin_edges_cm3.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain("bin edges must be strictly ascending"));
    }
    let mut edges = Vec::with_capacity(bin_edges_cm3.len() + 2);
    if bin_edges_cm3.first() != Some(&0.0) {
        edges.push(0.0);
    }
    edges.extend_from_slice(bin_edges_cm3);
    if edges.last() != Some(&f64::INFINITY) {
        edges.push(f64::INFINITY);
    }
    let mut bins: Vec<SizeBin> = edges
        .windows(2)
        .map(|w| SizeBin {
            lower_cm3: w[0],
            upper_cm3: w[1],
            n_lesions: 0,
            n_hits: 0,
            sensitivity: None,
        })
        .collect();
    for r in results {
        if r.voxel_spacing.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::domain(format!("volume {} has invalid voxel spacing", r.volume_id)));
        }
        let m = match_volume(r, cfg);
        for (gi, gt) in r.gts.iter().enumerate() {
            let v = r.lesion_cm3(gt);
            let Some(bin) = bins.iter_mut().find(|b| v > b.lower_cm3 && v <= b.upper_cm3) else {
                continue;
            };
            bin.n_lesions += 1;
            if m.hits.contains(&gi) {
                bin.n_hits += 1;
            }
        }
    }
    for b in &mut bins {
        b.sensitivity = (b.n_lesions > 0).then(|| b.n_hits as f64 / b.n_lesions as f64);
    }
    Ok(bins)
}

/// `w * det_score + (1 - w) * cls_score`.
pub fn fuse_scores(det_score: f64, cls_score: f64, w: f64) -> f64 {
    w * det_score + (1.0 - w) * cls_score
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::domain("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::domain("scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::domain("ROC analysis needs both classes present"));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve by trapezoidal integration over every distinct
/// score threshold. Tied scores contribute half credit, so the result equals
/// `P(s+ > s-) + P(s+ = s-) / 2`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // Twice the area in (fp, tp) count units; integers until the final division.
    let mut area2 = 0.0;
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += ((fp - fp0) * (tp + tp0)) as f64;
    }
    Ok(area2 / (2.0 * pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub auc: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// Confusion-matrix rates with `score >= threshold` predicted positive, plus AUC.
pub fn classification_report(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ClassificationReport> {
    let (pos, neg) = check_binary(scores, labels)?;
    let (mut tp, mut fp) = (0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            _ => {}
        }
    }
    let (tn, fn_) = (neg - fp, pos - tp);
    Ok(ClassificationReport {
        accuracy: (tp + tn) as f64 / scores.len() as f64,
        sensitivity: tp as f64 / pos as f64,
        specificity: tn as f64 / neg as f64,
        auc: roc_auc(scores, labels)?,
        tp,
        fp,
        tn,
        fn_,
    })
}
