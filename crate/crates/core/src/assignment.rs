//! Anchor labeling against ground-truth lesions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou3d, Box3};

/// Foreground lesion class. Class index 0 in score vectors is background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Benign,
    Malignant,
}

impl Category {
    pub const ALL: [Category; 2] = [Category::Benign, Category::Malignant];

    /// Index into a (background, benign, malignant) score vector.
    pub fn class_index(self) -> usize {
        match self {
            Category::Benign => 1,
            Category::Malignant => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Benign => "benign",
            Category::Malignant => "malignant",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "box")]
    pub bbox: Box3,
    pub category: Category,
}

impl GroundTruth {
    pub fn new(bbox: Box3, category: Category) -> Self {
        Self { bbox, category }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssignmentConfig {
    pub positive_iou_threshold: f64,
    pub negative_iou_threshold: f64,
    pub force_best_match: bool,
}

impl Default for AssignmentConfig {
    fn default() -> Self {
        Self {
            positive_iou_threshold: 0.2,
            negative_iou_threshold: 0.1,
            force_best_match: true,
        }
    }
}

impl AssignmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (neg, pos) = (self.negative_iou_threshold, self.positive_iou_threshold);
        if !(0.0..=1.0).contains(&neg) || !(0.0..=1.0).contains(&pos) || neg > pos {
            return Err(Error::config(format!(
                "need 0 <= negative_iou_threshold ({neg}) <= positive_iou_threshold ({pos}) <= 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "label", rename_all = "lowercase")]
pub enum Label {
    Positive { gt_index: usize },
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorAssignment {
    pub anchor_index: usize,
    #[serde(flatten)]
    pub label: Label,
    /// IoU with the matched lesion for positives, best IoU for ignored anchors, 0 for negatives.
    pub iou: f64,
}

impl AnchorAssignment {
    pub fn is_positive(&self) -> bool {
        matches!(self.label, Label::Positive { .. })
    }

    pub fn is_negative(&self) -> bool {
        self.label == Label::Negative
    }

    pub fn gt_index(&self) -> Option<usize> {
        match self.label {
            Label::Positive { gt_index } => Some(gt_index),
            _ => None,
        }
    }
}

/// Labels each anchor positive, negative or ignore.
///
/// Threshold comparisons are strict: an anchor whose best IoU equals a
/// threshold is ignored. Ties between lesions go to the lowest lesion index,
/// ties between anchors for a forced match go to the lowest anchor index.
pub fn assign_anchors(
    anchors: &[Box3],
    gts: &[GroundTruth],
    config: &AssignmentConfig,
) -> Result<Vec<AnchorAssignment>> {
    config.validate()?;
    if anchors.is_empty() {
        return Err(Error::domain("cannot assign an empty anchor set"));
    }
    if gts.is_empty() {
        return Ok((0..anchors.len())
            .map(|anchor_index| AnchorAssignment {
                anchor_index,
                label: Label::Negative,
                iou: 0.0,
            })
            .collect());
    }

    // Per-lesion best anchor, tracked while scanning anchors once.
    let mut best_anchor: Vec<Option<(usize, f64)>> = vec![None; gts.len()];
    let mut out = Vec::with_capacity(anchors.len());
    let mut row = vec![0.0; gts.len()];

    for (ai, anchor) in anchors.iter().enumerate() {
        let mut max_iou = 0.0;
        let mut argmax = 0;
        for (gi, gt) in gts.iter().enumerate() {
            let v = iou3d(anchor, &gt.bbox);
            row[gi] = v;
            if v > max_iou {
                max_iou = v;
                argmax = gi;
            }
            if v > 0.0 && best_anchor[gi].is_none_or(|(_, best)| v > best) {
                best_anchor[gi] = Some((ai, v));
            }
        }
        let (label, iou) = if max_iou > config.positive_iou_threshold {
            (Label::Positive { gt_index: argmax }, max_iou)
        } else if max_iou < config.negative_iou_threshold {
            (Label::Negative, 0.0)
        } else {
            (Label::Ignore, max_iou)
        };
        out.push(AnchorAssignment {
            anchor_index: ai,
            label,
            iou,
        });
    }

    if config.force_best_match {
        // Anchor claimed by several lesions goes to the one it overlaps most.
        let mut claims: Vec<(usize, usize, f64)> = Vec::new();
        for (gi, best) in best_anchor.iter().enumerate() {
            let Some((ai, v)) = *best else { continue };
            match claims.iter_mut().find(|(a, _, _)| *a == ai) {
                Some(claim) if v > claim.2 => *claim = (ai, gi, v),
                Some(_) => {}
                None => claims.push((ai, gi, v)),
            }
        }
        for (ai, gi, v) in claims {
            out[ai].label = Label::Positive { gt_index: gi };
            out[ai].iou = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Box along x with unit cross-section, covering [lo, hi).
    fn bar(lo: f64, hi: f64) -> Box3 {
        Box3::from_corners([lo, 0.0, 0.0], [hi, 1.0, 1.0]).unwrap()
    }

    fn gt(b: Box3) -> GroundTruth {
        GroundTruth::new(b, Category::Malignant)
    }

    fn no_force() -> AssignmentConfig {
        AssignmentConfig {
            force_best_match: false,
            ..Default::default()
        }
    }

    #[test]
    fn four_labeling_cases() {
        let lesion = bar(0.0, 100.0);
        // IoU of bar(0, x) with bar(0, 100) is x / 100.
        let anchors = [bar(0.0, 25.0), bar(0.0, 5.0), bar(0.0, 15.0), bar(0.0, 30.0)];
        let out = assign_anchors(&anchors, &[gt(lesion)], &AssignmentConfig::default()).unwrap();
        assert_eq!(out[0].label, Label::Positive { gt_index: 0 });
        assert!((out[0].iou - 0.25).abs() < 1e-12);
        assert_eq!(out[1].label, Label::Negative);
        assert_eq!(out[2].label, Label::Ignore);

        // Best match below the positive threshold is still promoted.
        let anchors = [bar(0.0, 12.0), bar(0.0, 5.0)];
        let out = assign_anchors(&anchors, &[gt(lesion)], &AssignmentConfig::default()).unwrap();
        assert_eq!(out[0].label, Label::Positive { gt_index: 0 });
        assert!((out[0].iou - 0.12).abs() < 1e-12);
        let out = assign_anchors(&anchors, &[gt(lesion)], &no_force()).unwrap();
        assert_eq!(out[0].label, Label::Ignore);
    }

    #[test]
    fn boundaries_fall_to_ignore() {
        let lesion = bar(0.0, 4.0);
        let anchors = [bar(0.0, 0.8), bar(0.0, 0.4)];
        let out = assign_anchors(&anchors, &[gt(lesion)], &no_force()).unwrap();
        // 0.8 / 4 = 0.2 and 0.4 / 4 = 0.1 exactly.
        assert_eq!(out[0].label, Label::Ignore);
        assert_eq!(out[1].label, Label::Ignore);
    }

    #[test]
    fn no_lesions_means_all_negative() {
        let anchors = [bar(0.0, 1.0), bar(3.0, 9.0)];
        let out = assign_anchors(&anchors, &[], &AssignmentConfig::default()).unwrap();
        assert!(out.iter().all(|a| a.is_negative() && a.iou == 0.0));
    }

    #[test]
    fn argmax_tie_goes_to_lowest_lesion() {
        let anchors = [bar(4.0, 6.0)];
        let gts = [gt(bar(0.0, 6.0)), gt(bar(4.0, 10.0))];
        let out = assign_anchors(&anchors, &gts, &AssignmentConfig::default()).unwrap();
        assert_eq!(out[0].label, Label::Positive { gt_index: 0 });
    }

    #[test]
    fn rejects_bad_config_and_empty_anchors() {
        let cfg = AssignmentConfig {
            positive_iou_threshold: 0.05,
            ..Default::default()
        };
        assert!(assign_anchors(&[bar(0.0, 1.0)], &[], &cfg).is_err());
        assert!(assign_anchors(&[], &[], &AssignmentConfig::default()).is_err());
    }

    #[test]
    fn shared_best_anchor_goes_to_higher_overlap() {
        let anchors = [bar(0.0, 10.0), bar(50.0, 51.0)];
        let gts = [gt(bar(0.0, 100.0)), gt(bar(0.0, 20.0))];
        let out = assign_anchors(&anchors, &gts, &AssignmentConfig::default()).unwrap();
        assert_eq!(out[0].label, Label::Positive { gt_index: 1 });
        assert!((out[0].iou - 0.5).abs() < 1e-12);
    }
}
