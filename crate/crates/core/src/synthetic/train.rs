//! Plain gradient descent on the toy scorer, and the end-to-end evaluation glue.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{assign_anchors, AnchorAssignment, AssignmentConfig, GroundTruth};
use crate::error::{Error, Result};
use crate::geometry::{clip_box, decode, generate_anchors, AnchorSpec, Box3, BoxDelta, Shape3};
use crate::inference::{run_inference, tile_volume, Detection, PipelineConfig};
use crate::losses::{
    cosine_similarity, rpn_loss, select_similarity_pairs, Embedding, LossParams, ModelOutputs,
    RpnBatch, NUM_CLASSES,
};
use crate::metrics::{aggregate, classification_report, fuse_scores, match_volume, ClassificationReport, MatchConfig, MetricsReport, VolumeResult};
use crate::Category;

use super::features::{AnchorFeatures, FeatureExtractor, FEATURE_DIM};
use super::scorer::ToyScorer;
use super::volume::Volume;

/// A training volume with anchors labeled and features extracted once.
#[derive(Debug, Clone)]
pub struct PreparedVolume {
    pub anchors: Vec<Box3>,
    pub gts: Vec<GroundTruth>,
    pub assignments: Vec<AnchorAssignment>,
    pub features: Vec<AnchorFeatures>,
}

pub fn prepare_dataset(
    data: &[(Volume, Vec<GroundTruth>)],
    anchor_spec: &AnchorSpec,
    assign_cfg: &AssignmentConfig,
) -> Result<Vec<PreparedVolume>> {
    data.iter()
        .map(|(vol, gts)| {
            let anchors = generate_anchors(anchor_spec, anchor_spec.feature_shape(vol.shape))?;
            let assignments = assign_anchors(&anchors, gts, assign_cfg)?;
            let fx = FeatureExtractor::new(vol);
            let features = anchors.iter().map(|a| fx.extract(a)).collect();
            Ok(PreparedVolume {
                anchors,
                gts: gts.clone(),
                assignments,
                features,
            })
        })
        .collect()
}

/// Per-feature mean and standard deviation over every anchor in the dataset.
/// Constant features get scale 1.
pub fn feature_statistics(dataset: &[PreparedVolume]) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0.0;
    let mut sum = [0.0; FEATURE_DIM];
    let mut sum2 = [0.0; FEATURE_DIM];
    for v in dataset {
        for f in &v.features {
            n += 1.0;
            for k in 0..FEATURE_DIM {
                sum[k] += f.0[k];
                sum2[k] += f.0[k] * f.0[k];
            }
        }
    }
    let n = f64::max(n, 1.0);
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let scale = (0..FEATURE_DIM)
        .map(|k| {
            let sd = (sum2[k] / n - mean[k] * mean[k]).max(0.0).sqrt();
            if sd > 1e-9 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 0.01,
            embed_dim: 64,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be >= 1"));
        }
        Ok(())
    }
}

/// Dataset-mean loss components at one step, measured before the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub l_rpn: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_sim: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub scorer: ToyScorer,
    pub history: Vec<StepLoss>,
}

impl ToyScorer {
    /// Scorer with normalization fitted to `dataset` and a seeded embedding head.
    pub fn for_dataset(dataset: &[PreparedVolume], embed_dim: usize, seed: u64) -> Result<Self> {
        let (mean, scale) = feature_statistics(dataset);
        ToyScorer::init(mean, scale, embed_dim, seed)
    }
}

/// Full-batch gradient descent on the composite loss.
///
/// Every step visits the volumes in order, draws fresh negative partners for
/// the similarity loss from a generator seeded by `cfg.seed`, and averages
/// gradients over volumes.
pub fn train_toy(
    dataset: &[PreparedVolume],
    scorer: ToyScorer,
    params: &LossParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    params.validate()?;
    cfg.validate()?;
    scorer.validate()?;
    if dataset.is_empty() {
        return Err(Error::domain("training needs at least one volume"));
    }
    let mut scorer = scorer;
    let mut history = Vec::with_capacity(cfg.steps);
    if cfg.steps == 0 {
        return Ok(TrainOutcome { scorer, history });
    }

    let normalized: Vec<Vec<[f64; FEATURE_DIM]>> = dataset
        .iter()
        .map(|v| v.features.iter().map(|f| scorer.normalize(f)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let f = FEATURE_DIM;
    let e = scorer.embed_dim;

    for step in 0..cfg.steps {
        let mut g_wc = vec![0.0; NUM_CLASSES * f];
        let mut g_bc = [0.0; NUM_CLASSES];
        let mut g_wr = vec![0.0; 6 * f];
        let mut g_br = [0.0; 6];
        let mut g_we = vec![0.0; e * f];
        let mut g_be = vec![0.0; e];
        let mut sums = [0.0; 4];

        for (v, xs) in dataset.iter().zip(&normalized) {
            let n = v.anchors.len();
            let mut outputs = ModelOutputs {
                logits: xs.iter().map(|x| scorer.logits(x)).collect(),
                deltas: vec![BoxDelta::default(); n],
                embeddings: vec![Embedding::default(); n],
            };
            for a in v.assignments.iter().filter(|a| a.is_positive()) {
                outputs.deltas[a.anchor_index] = scorer.delta(&xs[a.anchor_index]);
            }
            let pairs = select_similarity_pairs(&v.assignments, &v.anchors, params, &mut rng)?;
            let referenced = pairs.referenced_anchors();
            for &i in &referenced {
                outputs.embeddings[i] = scorer.embedding(&xs[i]);
            }
            let bundle = rpn_loss(
                &RpnBatch {
                    anchors: &v.anchors,
                    gts: &v.gts,
                    assignments: &v.assignments,
                    outputs: &outputs,
                    pairs: &pairs,
                },
                params,
            )?;
            sums[0] += bundle.l_rpn;
            sums[1] += bundle.l_cls;
            sums[2] += bundle.l_reg;
            sums[3] += bundle.l_sim;

            for a in &v.assignments {
                let i = a.anchor_index;
                let x = &xs[i];
                if a.is_positive() || a.is_negative() {
                    let g = &bundle.grad_logits[i];
                    for r in 0..NUM_CLASSES {
                        g_bc[r] += g[r];
                        for k in 0..f {
                            g_wc[r * f + k] += g[r] * x[k];
                        }
                    }
                }
                if a.is_positive() {
                    let g = &bundle.grad_deltas[i];
                    for r in 0..6 {
                        g_br[r] += g[r];
                        for k in 0..f {
                            g_wr[r * f + k] += g[r] * x[k];
                        }
                    }
                }
            }
            for &i in &referenced {
                let g = &bundle.grad_embeddings[i];
                let x = &xs[i];
                for r in 0..g.len() {
                    g_be[r] += g[r];
                    for k in 0..f {
                        g_we[r * f + k] += g[r] * x[k];
                    }
                }
            }
        }

        let m = dataset.len() as f64;
        let record = StepLoss {
            step,
            l_rpn: sums[0] / m,
            l_cls: sums[1] / m,
            l_reg: sums[2] / m,
            l_sim: sums[3] / m,
        };
        for (what, v) in [("l_rpn", record.l_rpn), ("l_cls", record.l_cls), ("l_reg", record.l_reg), ("l_sim", record.l_sim)] {
            if !v.is_finite() {
                return Err(Error::Diverged {
                    step,
                    what: what.into(),
                });
            }
        }
        history.push(record);

        let lr = cfg.learning_rate / m;
        let apply = |w: &mut [f64], g: &[f64]| {
            for (w, g) in w.iter_mut().zip(g) {
                *w -= lr * g;
            }
        };
        apply(&mut scorer.w_cls, &g_wc);
        apply(&mut scorer.b_cls, &g_bc);
        apply(&mut scorer.w_reg, &g_wr);
        apply(&mut scorer.b_reg, &g_br);
        apply(&mut scorer.w_emb, &g_we);
        apply(&mut scorer.b_emb, &g_be);
        if !scorer.is_finite() {
            return Err(Error::Diverged {
                step,
                what: "scorer parameters".into(),
            });
        }
    }
    Ok(TrainOutcome { scorer, history })
}

/// Mean cosine similarity over all pairs of positive anchors matched to the same lesion.
pub fn mean_positive_cosine(scorer: &ToyScorer, dataset: &[PreparedVolume]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in dataset {
        for g in 0..v.gts.len() {
            let embs: Vec<Embedding> = v
                .assignments
                .iter()
                .filter(|a| a.gt_index() == Some(g))
                .map(|a| scorer.embedding(&scorer.normalize(&v.features[a.anchor_index])))
                .collect();
            for i in 0..embs.len() {
                for j in i + 1..embs.len() {
                    sum += cosine_similarity(&embs[i], &embs[j])?;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::domain("no positive anchor pairs to compare"));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Weight of the detector's malignancy score when fused with the re-scored one.
    pub fusion_weight: f64,
    /// Fused malignancy at or above this is called malignant.
    pub classification_threshold: f64,
    pub matching: MatchConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fusion_weight: 0.5,
            classification_threshold: 0.5,
            matching: MatchConfig::default(),
        }
    }
}

fn malignancy(p: &[f64; NUM_CLASSES]) -> [f64; 2] {
    let fg = p[1] + p[2];
    if fg > 0.0 {
        [p[1] / fg, p[2] / fg]
    } else {
        [0.5, 0.5]
    }
}

/// Patch-local candidate detections for every anchor of every tile.
pub fn patch_detections(
    scorer: &ToyScorer,
    volume: &Volume,
    anchor_spec: &AnchorSpec,
    pipeline: &PipelineConfig,
) -> Result<Vec<(Shape3, Vec<Detection>)>> {
    let origins = tile_volume(volume.shape, pipeline.patch_shape)?;
    let anchors = generate_anchors(anchor_spec, anchor_spec.feature_shape(pipeline.patch_shape))?;
    let fx = FeatureExtractor::new(volume);
    Ok(origins
        .into_iter()
        .map(|origin| {
            let offset = origin.map(|o| o as f64);
            let dets = anchors
                .iter()
                .map(|a| {
                    let out = scorer.forward(&fx.extract(&a.translated(offset)));
                    let p = out.scores.probabilities();
                    let bbox = clip_box(&decode(a, &out.delta), pipeline.patch_shape);
                    Detection::new(bbox, 1.0 - p[0]).with_class_probs(malignancy(&p))
                })
                .collect();
            (origin, dets)
        })
        .collect())
}

/// Second look at each final detection: re-score the detected region with the
/// class head and fuse it with the detector's own class probabilities.
pub fn fuse_classification(scorer: &ToyScorer, volume: &Volume, dets: &mut [Detection], fusion_weight: f64) {
    let fx = FeatureExtractor::new(volume);
    for d in dets {
        let p = scorer.forward(&fx.extract(&d.bbox)).scores.probabilities();
        let second = malignancy(&p)[1];
        let first = d.class_probs.map_or(0.5, |c| c[1]);
        let fused = fuse_scores(first, second, fusion_weight);
        d.class_probs = Some([1.0 - fused, fused]);
    }
}

/// Full detection pipeline on one volume, returning volume-space detections.
pub fn detect_volume(
    scorer: &ToyScorer,
    volume: &Volume,
    gts: Option<&[GroundTruth]>,
    anchor_spec: &AnchorSpec,
    pipeline: &PipelineConfig,
    fusion_weight: f64,
) -> Result<Vec<Detection>> {
    let per_patch = patch_detections(scorer, volume, anchor_spec, pipeline)?;
    let mut dets = run_inference(&per_patch, pipeline, gts)?;
    fuse_classification(scorer, volume, &mut dets, fusion_weight);
    Ok(dets)
}

/// Malignancy score and label of every hit lesion, taken from the detection
/// overlapping it most. Missed lesions are not classified.
pub fn lesion_classification_scores(results: &[VolumeResult], cfg: &MatchConfig) -> (Vec<f64>, Vec<bool>) {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for r in results {
        let m = match_volume(r, cfg);
        for (&gi, &di) in m.hits.iter().zip(&m.best_detection) {
            scores.push(r.detections[di].class_probs.map_or(0.5, |c| c[1]));
            labels.push(r.gts[gi].category == Category::Malignant);
        }
    }
    (scores, labels)
}

#[derive(Debug, Clone)]
pub struct ToyEvaluation {
    pub report: MetricsReport,
    /// `None` when the hit lesions do not cover both classes.
    pub classification: Option<ClassificationReport>,
    pub results: Vec<VolumeResult>,
}

pub fn evaluate_toy(
    scorer: &ToyScorer,
    test: &[(Volume, Vec<GroundTruth>)],
    anchor_spec: &AnchorSpec,
    pipeline: &PipelineConfig,
    cfg: &EvalConfig,
) -> Result<ToyEvaluation> {
    let mut results = Vec::with_capacity(test.len());
    for (i, (vol, gts)) in test.iter().enumerate() {
        let dets = detect_volume(scorer, vol, Some(gts), anchor_spec, pipeline, cfg.fusion_weight)?;
        results.push(VolumeResult::new(format!("vol_{i:04}"), gts.clone(), dets, vol.spacing));
    }
    let report = aggregate(&results, &cfg.matching)?;
    let (scores, labels) = lesion_classification_scores(&results, &cfg.matching);
    let classification = classification_report(&scores, &labels, cfg.classification_threshold).ok();
    Ok(ToyEvaluation {
        report,
        classification,
        results,
    })
}
