//! Detector training losses with hand-derived gradients.
//!
//! The composite objective is
//!
//! ```text
//! L_rpn = L_reg + L_cls + lambda * L_sim
//! ```
//!
//! where `L_cls` is a cross entropy whose positive terms are reweighted by
//! `iou^eta` (normalized so the positive sum is preserved), `L_reg` is smooth L1
//! on the box deltas, and `L_sim` is a cosine-similarity contrast between
//! embeddings of overlapping positive anchors and randomly drawn negatives.
//!
//! Gradients are taken with respect to model outputs (logits, deltas,
//! embeddings). The IoU weights are treated as constants during
//! differentiation.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{AnchorAssignment, GroundTruth};
use crate::error::{Error, Result};
use crate::geometry::{decode, encode, iou3d, Box3, BoxDelta};

/// Background, benign, malignant.
pub const NUM_CLASSES: usize = 3;
pub const BACKGROUND: usize = 0;

/// Raw class logits for one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub logits: [f64; NUM_CLASSES],
}

impl ClassScores {
    pub fn new(logits: [f64; NUM_CLASSES]) -> Self {
        Self { logits }
    }

    pub fn log_softmax(&self) -> [f64; NUM_CLASSES] {
        let m = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + self.logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        self.logits.map(|l| l - lse)
    }

    pub fn probabilities(&self) -> [f64; NUM_CLASSES] {
        let m = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e = self.logits.map(|l| (l - m).exp());
        let z: f64 = e.iter().sum();
        e.map(|v| v / z)
    }
}

/// Per-anchor embedding vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Which box the IoU weight of a positive anchor is measured on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouSource {
    /// The regressed box decoded from the predicted deltas.
    #[default]
    Regressed,
    /// The anchor itself.
    Anchor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossParams {
    pub eta: f64,
    pub lambda: f64,
    pub pair_gt_iou_threshold: f64,
    pub pair_anchor_iou_threshold: f64,
    pub smooth_l1_beta: f64,
    pub iou_source: IouSource,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            eta: 1.5,
            lambda: 0.7,
            pair_gt_iou_threshold: 0.3,
            pair_anchor_iou_threshold: 0.2,
            smooth_l1_beta: 1.0,
            iou_source: IouSource::Regressed,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::config(format!("eta must be >= 0, got {}", self.eta)));
        }
        if !self.lambda.is_finite() {
            return Err(Error::config("lambda must be finite"));
        }
        for (name, v) in [
            ("pair_gt_iou_threshold", self.pair_gt_iou_threshold),
            ("pair_anchor_iou_threshold", self.pair_anchor_iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.smooth_l1_beta.is_finite() && self.smooth_l1_beta > 0.0) {
            return Err(Error::config("smooth_l1_beta must be positive"));
        }
        Ok(())
    }
}

fn check_target(target: usize) -> Result<()> {
    if target >= NUM_CLASSES {
        return Err(Error::domain(format!("class index {target} out of range")));
    }
    Ok(())
}

/// `-ln p[target]`, evaluated through log-sum-exp.
pub fn cross_entropy(scores: &ClassScores, target: usize) -> Result<f64> {
    check_target(target)?;
    Ok(-scores.log_softmax()[target])
}

/// Cross entropy and its gradient `p - onehot(target)` with respect to logits.
fn cross_entropy_with_grad(scores: &ClassScores, target: usize) -> (f64, [f64; NUM_CLASSES]) {
    let log_p = scores.log_softmax();
    let mut grad = log_p.map(f64::exp);
    grad[target] -= 1.0;
    (-log_p[target], grad)
}

/// IoU weights for positive samples:
///
/// `w_i = iou_i^eta * sum(ce) / sum(iou^eta * ce)`
///
/// which keeps `sum(w_i * ce_i) == sum(ce_i)`. With `eta == 0` every weight is 1.
pub fn iou_balance_weights(ious: &[f64], ces: &[f64], eta: f64) -> Result<Vec<f64>> {
    if ious.len() != ces.len() || ious.is_empty() {
        return Err(Error::domain("ious and ces must be nonempty and of equal length"));
    }
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(Error::domain(format!("eta must be >= 0, got {eta}")));
    }
    if ious.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::domain("ious must lie in [0, 1]"));
    }
    if ces.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::domain("cross entropies must be finite and >= 0"));
    }
    if eta == 0.0 {
        return Ok(vec![1.0; ious.len()]);
    }
    let scaled: Vec<f64> = ious.iter().map(|iou| iou.powf(eta)).collect();
    let num: f64 = ces.iter().sum();
    let den: f64 = scaled.iter().zip(ces).map(|(s, ce)| s * ce).sum();
    if den <= 0.0 || !den.is_finite() {
        return Err(Error::DegenerateBatch);
    }
    let ratio = num / den;
    Ok(scaled.into_iter().map(|s| s * ratio).collect())
}

/// A positive anchor's scores, target class and IoU.
pub type PositiveSample<'a> = (&'a ClassScores, usize, f64);

/// Value and logit gradients of the IoU-balanced classification loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsLoss {
    pub value: f64,
    pub weights: Vec<f64>,
    pub positive_grads: Vec<[f64; NUM_CLASSES]>,
    pub negative_grads: Vec<[f64; NUM_CLASSES]>,
}

/// `sum_pos w_i * CE_i + sum_neg CE_i` (an unnormalized sum).
///
/// Negatives are always scored against the background class.
pub fn iou_balanced_cls_loss(
    positives: &[PositiveSample<'_>],
    negatives: &[&ClassScores],
    eta: f64,
) -> Result<ClsLoss> {
    let weights = if positives.is_empty() {
        Vec::new()
    } else {
        let mut ces = Vec::with_capacity(positives.len());
        for &(scores, target, _) in positives {
            ces.push(cross_entropy(scores, target)?);
        }
        let ious: Vec<f64> = positives.iter().map(|p| p.2).collect();
        iou_balance_weights(&ious, &ces, eta)?
    };
    weighted_cls_loss(positives, negatives, &weights)
}

/// Same loss with the positive weights supplied by the caller.
pub fn weighted_cls_loss(
    positives: &[PositiveSample<'_>],
    negatives: &[&ClassScores],
    weights: &[f64],
) -> Result<ClsLoss> {
    if weights.len() != positives.len() {
        return Err(Error::domain("one weight per positive sample is required"));
    }
    let mut value = 0.0;
    let mut positive_grads = Vec::with_capacity(positives.len());
    for (&(scores, target, _), &w) in positives.iter().zip(weights) {
        check_target(target)?;
        let (ce, g) = cross_entropy_with_grad(scores, target);
        value += w * ce;
        positive_grads.push(g.map(|v| w * v));
    }
    let mut negative_grads = Vec::with_capacity(negatives.len());
    for scores in negatives {
        let (ce, g) = cross_entropy_with_grad(scores, BACKGROUND);
        value += ce;
        negative_grads.push(g);
    }
    Ok(ClsLoss {
        value,
        weights: weights.to_vec(),
        positive_grads,
        negative_grads,
    })
}

pub fn cosine_similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    Ok(cosine_with_grad(a, b)?.0)
}

/// Cosine similarity and its gradients with respect to both arguments.
fn cosine_with_grad(a: &Embedding, b: &Embedding) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if a.dim() != b.dim() {
        return Err(Error::domain(format!(
            "embedding dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::domain("cosine similarity of a zero-norm embedding"));
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    let ga = a
        .0
        .iter()
        .zip(&b.0)
        .map(|(x, y)| y / (na * nb) - cos * x / (na * na))
        .collect();
    let gb = a
        .0
        .iter()
        .zip(&b.0)
        .map(|(x, y)| x / (na * nb) - cos * y / (nb * nb))
        .collect();
    Ok((cos.clamp(-1.0, 1.0), ga, gb))
}

/// Anchor index pairs feeding the similarity loss.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SimilarityPairs {
    pub positive: Vec<(usize, usize)>,
    pub negative: Vec<(usize, usize)>,
}

impl SimilarityPairs {
    pub fn is_empty(&self) -> bool {
        self.positive.is_empty() || self.negative.is_empty()
    }

    /// Anchor indices whose embeddings the loss reads, ascending and deduplicated.
    pub fn referenced_anchors(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self
            .positive
            .iter()
            .chain(&self.negative)
            .flat_map(|&(i, j)| [i, j])
            .collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }
}

/// Positive anchors with lesion IoU above the lesion threshold form a pair
/// when their mutual IoU exceeds the anchor threshold. Each positive pair
/// `(i, j)` then gets one negative partner `(i, k)` drawn uniformly, without
/// replacement while enough negatives exist.
///
/// Returns empty pairs when no positive pair qualifies or no negative exists.
pub fn select_similarity_pairs<R: Rng + ?Sized>(
    assignments: &[AnchorAssignment],
    anchors: &[Box3],
    params: &LossParams,
    rng: &mut R,
) -> Result<SimilarityPairs> {
    if assignments.len() != anchors.len() {
        return Err(Error::domain("assignments and anchors must align by index"));
    }
    let candidates: Vec<usize> = assignments
        .iter()
        .filter(|a| a.is_positive() && a.iou > params.pair_gt_iou_threshold)
        .map(|a| a.anchor_index)
        .collect();
    let negatives: Vec<usize> = assignments
        .iter()
        .filter(|a| a.is_negative())
        .map(|a| a.anchor_index)
        .collect();

    let mut positive = Vec::new();
    for (n, &i) in candidates.iter().enumerate() {
        for &j in &candidates[n + 1..] {
            if iou3d(&anchors[i], &anchors[j]) > params.pair_anchor_iou_threshold {
                positive.push((i, j));
            }
        }
    }
    if positive.is_empty() || negatives.is_empty() {
        return Ok(SimilarityPairs::default());
    }

    let picks: Vec<usize> = if negatives.len() >= positive.len() {
        index::sample(rng, negatives.len(), positive.len()).into_vec()
    } else {
        (0..positive.len())
            .map(|_| rng.random_range(0..negatives.len()))
            .collect()
    };
    let negative = positive
        .iter()
        .zip(picks)
        .map(|(&(i, _), k)| (i, negatives[k]))
        .collect();
    Ok(SimilarityPairs { positive, negative })
}

/// `(2 - (s_pp - s_pn)) / 4`: the similarity loss given mean similarities.
///
/// `log(e^a / e^b)` is `a - b`, so no exponentials are evaluated.
pub fn similarity_from_means(s_pp: f64, s_pn: f64) -> f64 {
    (2.0 - (s_pp - s_pn)) / 4.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLoss {
    pub value: f64,
    pub s_pp: f64,
    pub s_pn: f64,
    pub positive_grads: Vec<(Vec<f64>, Vec<f64>)>,
    pub negative_grads: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Similarity loss over mean positive-pair and positive-negative cosine similarity.
///
/// Either list empty yields a zero loss with no gradients.
pub fn similarity_loss(
    pos_pairs: &[(&Embedding, &Embedding)],
    neg_pairs: &[(&Embedding, &Embedding)],
) -> Result<SimLoss> {
    if pos_pairs.is_empty() || neg_pairs.is_empty() {
        return Ok(SimLoss {
            value: 0.0,
            s_pp: 0.0,
            s_pn: 0.0,
            positive_grads: Vec::new(),
            negative_grads: Vec::new(),
        });
    }
    let mean_with_grads = |pairs: &[(&Embedding, &Embedding)], scale: f64| -> Result<_> {
        let mut sum = 0.0;
        let mut grads = Vec::with_capacity(pairs.len());
        for (a, b) in pairs {
            let (cos, ga, gb) = cosine_with_grad(a, b)?;
            sum += cos;
            let k = scale / pairs.len() as f64;
            grads.push((
                ga.into_iter().map(|v| v * k).collect(),
                gb.into_iter().map(|v| v * k).collect(),
            ));
        }
        Ok((sum / pairs.len() as f64, grads))
    };
    let (s_pp, positive_grads) = mean_with_grads(pos_pairs, -0.25)?;
    let (s_pn, negative_grads) = mean_with_grads(neg_pairs, 0.25)?;
    Ok(SimLoss {
        value: similarity_from_means(s_pp, s_pn),
        s_pp,
        s_pn,
        positive_grads,
        negative_grads,
    })
}

/// Smooth L1 summed over the six delta components, with its gradient in `pred`.
pub fn smooth_l1(pred: &BoxDelta, target: &BoxDelta, beta: f64) -> (f64, [f64; 6]) {
    let (p, t) = (pred.to_array(), target.to_array());
    let mut value = 0.0;
    let mut grad = [0.0; 6];
    for k in 0..6 {
        let x = p[k] - t[k];
        if x.abs() < beta {
            value += 0.5 * x * x / beta;
            grad[k] = x / beta;
        } else {
            value += x.abs() - 0.5 * beta;
            grad[k] = x.signum();
        }
    }
    (value, grad)
}

/// `L_reg + L_cls + lambda * L_sim`.
pub fn total_rpn_loss(l_reg: f64, l_cls: f64, l_sim: f64, lambda: f64) -> f64 {
    l_reg + l_cls + lambda * l_sim
}

/// Per-anchor model outputs. Embeddings of anchors that no similarity pair
/// references may be left empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelOutputs {
    pub logits: Vec<ClassScores>,
    pub deltas: Vec<BoxDelta>,
    pub embeddings: Vec<Embedding>,
}

/// Everything one loss evaluation needs, aligned by anchor index.
#[derive(Debug, Clone, Copy)]
pub struct RpnBatch<'a> {
    pub anchors: &'a [Box3],
    pub gts: &'a [GroundTruth],
    pub assignments: &'a [AnchorAssignment],
    pub outputs: &'a ModelOutputs,
    pub pairs: &'a SimilarityPairs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_sim: f64,
    pub l_rpn: f64,
    /// IoU weights of positive anchors in ascending anchor order.
    pub positive_weights: Vec<f64>,
    pub n_positive: usize,
    pub n_negative: usize,
    pub grad_logits: Vec<[f64; NUM_CLASSES]>,
    pub grad_deltas: Vec<[f64; 6]>,
    pub grad_embeddings: Vec<Vec<f64>>,
}

/// Composite detector loss and its gradients.
///
/// `L_reg` is averaged over positives; `L_cls` is divided by the number of
/// labeled (positive plus negative) anchors.
pub fn rpn_loss(batch: &RpnBatch<'_>, params: &LossParams) -> Result<LossBundle> {
    rpn_loss_impl(batch, params, None)
}

/// [`rpn_loss`] with the positive IoU weights held at supplied values.
pub fn rpn_loss_with_weights(
    batch: &RpnBatch<'_>,
    params: &LossParams,
    weights: &[f64],
) -> Result<LossBundle> {
    rpn_loss_impl(batch, params, Some(weights))
}

fn rpn_loss_impl(
    batch: &RpnBatch<'_>,
    params: &LossParams,
    frozen: Option<&[f64]>,
) -> Result<LossBundle> {
    params.validate()?;
    let n = batch.anchors.len();
    let out = batch.outputs;
    if batch.assignments.len() != n || out.logits.len() != n || out.deltas.len() != n {
        return Err(Error::domain(
            "anchors, assignments, logits and deltas must have one entry per anchor",
        ));
    }

    let mut pos_idx = Vec::new();
    let mut pos_gt = Vec::new();
    let mut neg_idx = Vec::new();
    for a in batch.assignments {
        if let Some(g) = a.gt_index() {
            if g >= batch.gts.len() {
                return Err(Error::domain(format!("assignment refers to missing lesion {g}")));
            }
            pos_idx.push(a.anchor_index);
            pos_gt.push(g);
        } else if a.is_negative() {
            neg_idx.push(a.anchor_index);
        }
    }

    let mut grad_logits = vec![[0.0; NUM_CLASSES]; n];
    let mut grad_deltas = vec![[0.0; 6]; n];
    let mut grad_embeddings = vec![Vec::new(); n];

    // Regression over positives.
    let mut l_reg = 0.0;
    if !pos_idx.is_empty() {
        let scale = 1.0 / pos_idx.len() as f64;
        for (&i, &g) in pos_idx.iter().zip(&pos_gt) {
            let pred = &out.deltas[i];
            if !pred.is_finite() {
                return Err(Error::domain(format!("non-finite deltas at anchor {i}")));
            }
            let target = encode(&batch.anchors[i], &batch.gts[g].bbox);
            let (v, g6) = smooth_l1(pred, &target, params.smooth_l1_beta);
            l_reg += v * scale;
            grad_deltas[i] = g6.map(|x| x * scale);
        }
    }

    // IoU-balanced classification.
    let ious: Vec<f64> = pos_idx
        .iter()
        .zip(&pos_gt)
        .map(|(&i, &g)| {
            let a = &batch.assignments[i];
            match params.iou_source {
                IouSource::Anchor => a.iou,
                IouSource::Regressed => {
                    iou3d(&decode(&batch.anchors[i], &out.deltas[i]), &batch.gts[g].bbox)
                }
            }
        })
        .collect();
    let positives: Vec<PositiveSample<'_>> = pos_idx
        .iter()
        .zip(&pos_gt)
        .zip(&ious)
        .map(|((&i, &g), &iou)| (&out.logits[i], batch.gts[g].category.class_index(), iou))
        .collect();
    let negatives: Vec<&ClassScores> = neg_idx.iter().map(|&i| &out.logits[i]).collect();
    let cls = match frozen {
        Some(w) => weighted_cls_loss(&positives, &negatives, w)?,
        None => match iou_balanced_cls_loss(&positives, &negatives, params.eta) {
            Err(Error::DegenerateBatch) => degenerate_fallback(batch, &pos_idx, &positives, &negatives, params)?,
            other => other?,
        },
    };
    let labeled = pos_idx.len() + neg_idx.len();
    let l_cls = if labeled == 0 {
        0.0
    } else {
        let scale = 1.0 / labeled as f64;
        for (&i, g) in pos_idx.iter().zip(&cls.positive_grads) {
            grad_logits[i] = g.map(|v| v * scale);
        }
        for (&i, g) in neg_idx.iter().zip(&cls.negative_grads) {
            grad_logits[i] = g.map(|v| v * scale);
        }
        cls.value * scale
    };

    // Similarity.
    let pairs = batch.pairs;
    let l_sim = if pairs.is_empty() {
        0.0
    } else {
        let fetch = |i: usize| -> Result<&Embedding> {
            out.embeddings
                .get(i)
                .ok_or_else(|| Error::domain(format!("missing embedding for anchor {i}")))
        };
        let mut pos = Vec::with_capacity(pairs.positive.len());
        for &(i, j) in &pairs.positive {
            pos.push((fetch(i)?, fetch(j)?));
        }
        let mut neg = Vec::with_capacity(pairs.negative.len());
        for &(i, k) in &pairs.negative {
            neg.push((fetch(i)?, fetch(k)?));
        }
        let sim = similarity_loss(&pos, &neg)?;
        let mut accumulate = |i: usize, g: &[f64]| {
            let slot = &mut grad_embeddings[i];
            if slot.is_empty() {
                slot.resize(g.len(), 0.0);
            }
            for (s, v) in slot.iter_mut().zip(g) {
                *s += params.lambda * v;
            }
        };
        for (&(i, j), (gi, gj)) in pairs.positive.iter().zip(&sim.positive_grads) {
            accumulate(i, gi);
            accumulate(j, gj);
        }
        for (&(i, k), (gi, gk)) in pairs.negative.iter().zip(&sim.negative_grads) {
            accumulate(i, gi);
            accumulate(k, gk);
        }
        sim.value
    };

    let l_rpn = total_rpn_loss(l_reg, l_cls, l_sim, params.lambda);
    Ok(LossBundle {
        l_cls,
        l_reg,
        l_sim,
        l_rpn,
        positive_weights: cls.weights,
        n_positive: pos_idx.len(),
        n_negative: neg_idx.len(),
        grad_logits,
        grad_deltas,
        grad_embeddings,
    })
}

/// Weights for a batch whose IoU-weighted CE sum is zero.
///
/// Regressed boxes can drift off every lesion early in training; the anchor
/// IoUs (positive by construction) stand in for them. If every positive CE is
/// zero the weights cannot change the loss and are set to 1.
fn degenerate_fallback(
    batch: &RpnBatch<'_>,
    pos_idx: &[usize],
    positives: &[PositiveSample<'_>],
    negatives: &[&ClassScores],
    params: &LossParams,
) -> Result<ClsLoss> {
    if params.iou_source == IouSource::Regressed {
        let anchored: Vec<PositiveSample<'_>> = positives
            .iter()
            .zip(pos_idx)
            .map(|(&(scores, target, _), &i)| (scores, target, batch.assignments[i].iou))
            .collect();
        match iou_balanced_cls_loss(&anchored, negatives, params.eta) {
            Err(Error::DegenerateBatch) => {}
            other => return other,
        }
    }
    weighted_cls_loss(positives, negatives, &vec![1.0; positives.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::{Category, Label};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_entropy_cases() {
        let confident = ClassScores::new([20.0, 0.0, 0.0]);
        assert!(cross_entropy(&confident, 0).unwrap() < 1e-8);
        let uniform = ClassScores::new([0.0; 3]);
        for t in 0..3 {
            assert!((cross_entropy(&uniform, t).unwrap() - 3f64.ln()).abs() < 1e-15);
        }
        assert!(cross_entropy(&uniform, 3).is_err());
        // No overflow on huge logits.
        let huge = ClassScores::new([1000.0, -1000.0, 0.0]);
        assert!((cross_entropy(&huge, 2).unwrap() - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let s = ClassScores::new([0.3, -2.0, 5.5]);
        let p = s.probabilities();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn weights_hand_example() {
        let w = iou_balance_weights(&[0.9, 0.3], &[1.0, 1.0], 1.0).unwrap();
        assert!((w[0] - 1.5).abs() < 1e-12);
        assert!((w[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn eta_zero_gives_unit_weights() {
        let w = iou_balance_weights(&[0.0, 0.4, 1.0], &[0.2, 0.0, 3.0], 0.0).unwrap();
        assert_eq!(w, vec![1.0; 3]);
    }

    #[test]
    fn weight_ratio_is_iou_ratio_to_the_eta() {
        for eta in [0.5, 1.0, 1.5, 3.0] {
            let w = iou_balance_weights(&[0.8, 0.4], &[0.7, 0.7], eta).unwrap();
            assert!((w[0] / w[1] - 2f64.powf(eta)).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_weights() {
        assert_eq!(
            iou_balance_weights(&[0.0, 0.0], &[1.0, 2.0], 1.5),
            Err(Error::DegenerateBatch)
        );
        assert!(iou_balance_weights(&[], &[], 1.0).is_err());
        assert!(iou_balance_weights(&[0.5], &[1.0, 1.0], 1.0).is_err());
        assert!(iou_balance_weights(&[1.5], &[1.0], 1.0).is_err());
    }

    #[test]
    fn cls_loss_without_negatives_is_weighted_positive_sum() {
        let a = ClassScores::new([0.1, 0.5, -0.3]);
        let b = ClassScores::new([1.0, -1.0, 2.0]);
        let pos = [(&a, 1, 0.9), (&b, 2, 0.35)];
        let loss = iou_balanced_cls_loss(&pos, &[], 1.5).unwrap();
        let ces = [cross_entropy(&a, 1).unwrap(), cross_entropy(&b, 2).unwrap()];
        let w = iou_balance_weights(&[0.9, 0.35], &ces, 1.5).unwrap();
        assert!((loss.value - (w[0] * ces[0] + w[1] * ces[1])).abs() < 1e-12);
        // Sum preserved.
        assert!((loss.value - (ces[0] + ces[1])).abs() < 1e-12);
    }

    #[test]
    fn cosine_cases() {
        let z = Embedding(vec![0.3, -1.2, 2.0]);
        assert!((cosine_similarity(&z, &z).unwrap() - 1.0).abs() < 1e-15);
        let e1 = Embedding(vec![1.0, 0.0]);
        let e2 = Embedding(vec![0.0, 1.0]);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);
        let other = Embedding(vec![1.0, 0.5, -0.25]);
        let scaled = Embedding(z.0.iter().map(|v| v * 7.5).collect());
        let (c1, c2) = (
            cosine_similarity(&z, &other).unwrap(),
            cosine_similarity(&scaled, &other).unwrap(),
        );
        assert!((c1 - c2).abs() < 1e-12);
        assert!(cosine_similarity(&Embedding(vec![0.0, 0.0]), &e1).is_err());
        assert!(cosine_similarity(&z, &e1).is_err());
    }

    #[test]
    fn similarity_endpoints() {
        assert_eq!(similarity_from_means(1.0, -1.0), 0.0);
        assert_eq!(similarity_from_means(-1.0, 1.0), 1.0);
        assert_eq!(similarity_from_means(0.3, 0.3), 0.5);

        let z = Embedding(vec![1.0, 2.0]);
        let neg = Embedding(vec![-1.0, -2.0]);
        let l = similarity_loss(&[(&z, &z)], &[(&z, &neg)]).unwrap();
        assert!(l.value.abs() < 1e-15);
        let empty = similarity_loss(&[], &[(&z, &neg)]).unwrap();
        assert_eq!(empty.value, 0.0);
    }

    #[test]
    fn smooth_l1_branches() {
        let zero = BoxDelta::default();
        assert_eq!(smooth_l1(&zero, &zero, 1.0).0, 0.0);
        let half = BoxDelta { dx: 0.5, ..zero };
        assert_eq!(smooth_l1(&half, &zero, 1.0).0, 0.125);
        let two = BoxDelta { dh: 2.0, ..zero };
        let (v, g) = smooth_l1(&two, &zero, 1.0);
        assert_eq!(v, 1.5);
        assert_eq!(g, [0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    fn cube(c: f64, s: f64) -> Box3 {
        Box3::new([c, 0.0, 0.0], [s, 1.0, 1.0]).unwrap()
    }

    fn assignment(i: usize, label: Label, iou: f64) -> AnchorAssignment {
        AnchorAssignment {
            anchor_index: i,
            label,
            iou,
        }
    }

    #[test]
    fn pair_selection_thresholds() {
        let pos = Label::Positive { gt_index: 0 };
        // Bars of unit cross-section: mutual IoU of [0,4) and [1,5) is 3/5.
        let anchors = [cube(2.0, 4.0), cube(3.0, 4.0), cube(50.0, 1.0)];
        let asg = [
            assignment(0, pos, 0.4),
            assignment(1, pos, 0.5),
            assignment(2, Label::Negative, 0.0),
        ];
        let params = LossParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs = select_similarity_pairs(&asg, &anchors, &params, &mut rng).unwrap();
        assert_eq!(pairs.positive, vec![(0, 1)]);
        assert_eq!(pairs.negative, vec![(0, 2)]);

        // Mutual IoU 1/7 is below the anchor threshold.
        let apart = [cube(2.0, 4.0), cube(5.0, 4.0), cube(50.0, 1.0)];
        let pairs = select_similarity_pairs(&asg, &apart, &params, &mut rng).unwrap();
        assert!(pairs.is_empty());

        // One member below the lesion-IoU threshold.
        let weak = [asg[0], assignment(1, pos, 0.3), asg[2]];
        let pairs = select_similarity_pairs(&weak, &anchors, &params, &mut rng).unwrap();
        assert!(pairs.positive.is_empty());
    }

    #[test]
    fn pair_selection_is_seeded() {
        let pos = Label::Positive { gt_index: 0 };
        let mut anchors = vec![cube(2.0, 4.0), cube(2.5, 4.0), cube(3.0, 4.0)];
        let mut asg = vec![
            assignment(0, pos, 0.9),
            assignment(1, pos, 0.8),
            assignment(2, pos, 0.7),
        ];
        for k in 3..40 {
            anchors.push(cube(100.0 + 3.0 * k as f64, 1.0));
            asg.push(assignment(k, Label::Negative, 0.0));
        }
        let params = LossParams::default();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            select_similarity_pairs(&asg, &anchors, &params, &mut rng).unwrap()
        };
        let a = run(7);
        assert_eq!(a, run(7));
        assert_eq!(a.positive.len(), 3);
        assert_eq!(a.negative.len(), 3);
        let mut partners: Vec<usize> = a.negative.iter().map(|p| p.1).collect();
        partners.sort_unstable();
        partners.dedup();
        assert_eq!(partners.len(), 3, "drawn without replacement");
    }

    #[test]
    fn rpn_combines_components() {
        assert!((total_rpn_loss(1.0, 2.0, 0.5, 0.7) - 3.35).abs() < 1e-12);
    }

    fn tiny_batch() -> (Vec<Box3>, Vec<GroundTruth>, Vec<AnchorAssignment>, ModelOutputs, SimilarityPairs) {
        let gt = GroundTruth::new(cube(2.5, 4.0), Category::Benign);
        let anchors = vec![cube(2.0, 4.0), cube(3.0, 4.0), cube(40.0, 2.0), cube(60.0, 2.0)];
        let pos = Label::Positive { gt_index: 0 };
        let asg = vec![
            assignment(0, pos, iou3d(&anchors[0], &gt.bbox)),
            assignment(1, pos, iou3d(&anchors[1], &gt.bbox)),
            assignment(2, Label::Negative, 0.0),
            assignment(3, Label::Ignore, 0.15),
        ];
        let outputs = ModelOutputs {
            logits: vec![
                ClassScores::new([0.2, 0.1, -0.4]),
                ClassScores::new([-0.3, 0.7, 0.0]),
                ClassScores::new([1.0, 0.0, 0.5]),
                ClassScores::new([0.0; 3]),
            ],
            deltas: vec![
                BoxDelta::from_array([0.1, 0.0, -0.1, 0.05, 0.0, 0.2]),
                BoxDelta::from_array([-0.2, 0.1, 0.0, 0.0, -0.1, 0.0]),
                BoxDelta::default(),
                BoxDelta::default(),
            ],
            embeddings: vec![
                Embedding(vec![1.0, 0.2, -0.5]),
                Embedding(vec![0.4, 1.0, 0.3]),
                Embedding(vec![-0.3, 0.2, 1.1]),
                Embedding::default(),
            ],
        };
        let pairs = SimilarityPairs {
            positive: vec![(0, 1)],
            negative: vec![(0, 2)],
        };
        (anchors, vec![gt], asg, outputs, pairs)
    }

    #[test]
    fn rpn_identity_and_ignored_anchor_has_no_gradient() {
        let (anchors, gts, asg, outputs, pairs) = tiny_batch();
        let batch = RpnBatch {
            anchors: &anchors,
            gts: &gts,
            assignments: &asg,
            outputs: &outputs,
            pairs: &pairs,
        };
        let params = LossParams::default();
        let b = rpn_loss(&batch, &params).unwrap();
        assert!((b.l_rpn - (b.l_reg + b.l_cls + 0.7 * b.l_sim)).abs() < 1e-12);
        assert_eq!((b.n_positive, b.n_negative), (2, 1));
        assert_eq!(b.grad_logits[3], [0.0; 3]);
        assert_eq!(b.grad_deltas[2], [0.0; 6]);
        assert!(b.grad_embeddings[3].is_empty());

        let no_sim = LossParams {
            lambda: 0.0,
            ..params
        };
        let b0 = rpn_loss(&batch, &no_sim).unwrap();
        assert!(b0
            .grad_embeddings
            .iter()
            .all(|g| g.iter().all(|v| *v == 0.0)));
        assert_eq!(b0.l_rpn, b0.l_reg + b0.l_cls);
    }

    #[test]
    fn rpn_rejects_misaligned_inputs() {
        let (anchors, gts, asg, mut outputs, pairs) = tiny_batch();
        outputs.deltas.pop();
        let batch = RpnBatch {
            anchors: &anchors,
            gts: &gts,
            assignments: &asg,
            outputs: &outputs,
            pairs: &pairs,
        };
        assert!(rpn_loss(&batch, &LossParams::default()).is_err());
    }

    #[test]
    fn regressed_boxes_off_target_fall_back_to_anchor_ious() {
        let (anchors, gts, asg, mut outputs, pairs) = tiny_batch();
        for i in 0..2 {
            outputs.deltas[i] = BoxDelta::from_array([50.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        }
        let batch = RpnBatch {
            anchors: &anchors,
            gts: &gts,
            assignments: &asg,
            outputs: &outputs,
            pairs: &pairs,
        };
        let b = rpn_loss(&batch, &LossParams::default()).unwrap();
        let ces: Vec<f64> = (0..2).map(|i| cross_entropy(&outputs.logits[i], 1).unwrap()).collect();
        let expected = iou_balance_weights(&[asg[0].iou, asg[1].iou], &ces, 1.5).unwrap();
        assert_eq!(b.positive_weights, expected);
    }
}
