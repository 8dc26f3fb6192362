//! Central finite-difference checks of the loss gradients on random batches.
//!
//! IoU weights are computed once per batch from the unperturbed outputs and
//! held fixed for every evaluation, matching how training differentiates.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{assign_anchors, AnchorAssignment, AssignmentConfig, Category, GroundTruth};
use crate::error::{Error, Result};
use crate::geometry::{Box3, BoxDelta};
use crate::losses::{
    rpn_loss, rpn_loss_with_weights, select_similarity_pairs, ClassScores, Embedding, LossBundle, LossParams,
    ModelOutputs, RpnBatch, SimilarityPairs, NUM_CLASSES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    LCls,
    LReg,
    LSim,
    LRpn,
}

impl LossTerm {
    pub const ALL: [LossTerm; 4] = [LossTerm::LCls, LossTerm::LReg, LossTerm::LSim, LossTerm::LRpn];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::LCls => "l_cls",
            LossTerm::LReg => "l_reg",
            LossTerm::LSim => "l_sim",
            LossTerm::LRpn => "l_rpn",
        }
    }

    fn value(self, b: &LossBundle) -> f64 {
        match self {
            LossTerm::LCls => b.l_cls,
            LossTerm::LReg => b.l_reg,
            LossTerm::LSim => b.l_sim,
            LossTerm::LRpn => b.l_rpn,
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossTerm::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config(format!("unknown loss term {s:?}; expected l_cls, l_reg, l_sim or l_rpn")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub n_batches: usize,
    pub seed: u64,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub embed_dim: usize,
    /// Test hook: scale this term's analytic gradient by 1.01 before comparing.
    #[serde(skip)]
    pub corrupt: Option<LossTerm>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            n_batches: 100,
            seed: 7,
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-6,
            embed_dim: 8,
            corrupt: None,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err(Error::config("step, rel_tol and abs_tol must be positive"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim must be >= 1"));
        }
        Ok(())
    }
}

/// Worst disagreement found for one loss term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermReport {
    pub term: LossTerm,
    /// `|a - n| / max(|a|, |n|, abs_tol / rel_tol)`; passing means below `rel_tol`.
    pub max_rel_error: f64,
    pub worst_batch: usize,
    /// Human-readable location of the worst component, e.g. `logits[3][1]`.
    pub worst_component: String,
    pub analytic: f64,
    pub numeric: f64,
    pub components_checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub n_batches: usize,
    pub terms: Vec<TermReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.terms.iter().all(|t| t.passed)
    }

    pub fn failing_terms(&self) -> Vec<LossTerm> {
        self.terms.iter().filter(|t| !t.passed).map(|t| t.term).collect()
    }
}

/// A self-contained loss batch.
#[derive(Debug, Clone)]
pub struct RandomBatch {
    pub anchors: Vec<Box3>,
    pub gts: Vec<GroundTruth>,
    pub assignments: Vec<AnchorAssignment>,
    pub outputs: ModelOutputs,
    pub pairs: SimilarityPairs,
}

impl RandomBatch {
    pub fn as_batch(&self) -> RpnBatch<'_> {
        RpnBatch {
            anchors: &self.anchors,
            gts: &self.gts,
            assignments: &self.assignments,
            outputs: &self.outputs,
            pairs: &self.pairs,
        }
    }
}

/// One to three lesions, anchors jittered around them plus background
/// anchors, random logits, small random deltas and dense embeddings.
pub fn random_batch<R: Rng + ?Sized>(rng: &mut R, params: &LossParams, embed_dim: usize) -> Result<RandomBatch> {
    let n_gt = rng.random_range(1..=3);
    let mut gts = Vec::with_capacity(n_gt);
    for g in 0..n_gt {
        let center = [40.0 * g as f64 + 20.0, 20.0, 20.0].map(|c| c + rng.random_range(-3.0..3.0));
        let size = [0; 3].map(|_| rng.random_range(6.0..16.0));
        let category = if rng.random_bool(0.5) { Category::Malignant } else { Category::Benign };
        gts.push(GroundTruth::new(Box3::new(center, size)?, category));
    }
    let mut anchors = Vec::new();
    for gt in &gts {
        for _ in 0..rng.random_range(4..=8) {
            let c = gt.bbox.center().map(|v| v + rng.random_range(-2.0..2.0));
            let s = gt.bbox.size().map(|v| v * rng.random_range(0.8..1.25));
            anchors.push(Box3::new(c, s)?);
        }
    }
    for _ in 0..rng.random_range(6..=14) {
        let c = [0; 3].map(|_| rng.random_range(0.0..120.0));
        let s = [0; 3].map(|_| rng.random_range(4.0..20.0));
        anchors.push(Box3::new(c, s)?);
    }
    let assignments = assign_anchors(&anchors, &gts, &AssignmentConfig::default())?;
    let n = anchors.len();
    let outputs = ModelOutputs {
        logits: (0..n)
            .map(|_| ClassScores::new([0; NUM_CLASSES].map(|_| rng.random_range(-2.0..2.0))))
            .collect(),
        deltas: (0..n)
            .map(|_| BoxDelta::from_array([0; 6].map(|_| rng.random_range(-0.3..0.3))))
            .collect(),
        embeddings: (0..n)
            .map(|_| Embedding((0..embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect(),
    };
    let pairs = select_similarity_pairs(&assignments, &anchors, params, rng)?;
    Ok(RandomBatch {
        anchors,
        gts,
        assignments,
        outputs,
        pairs,
    })
}

#[derive(Clone, Copy)]
enum Slot {
    Logit(usize, usize),
    Delta(usize, usize),
    Emb(usize, usize),
}

impl Slot {
    fn describe(self) -> String {
        match self {
            Slot::Logit(i, k) => format!("logits[{i}][{k}]"),
            Slot::Delta(i, k) => format!("deltas[{i}][{k}]"),
            Slot::Emb(i, k) => format!("embeddings[{i}][{k}]"),
        }
    }

    fn get_mut(self, out: &mut ModelOutputs) -> &mut f64 {
        match self {
            Slot::Logit(i, k) => &mut out.logits[i].logits[k],
            Slot::Delta(i, k) => match k {
                0 => &mut out.deltas[i].dx,
                1 => &mut out.deltas[i].dy,
                2 => &mut out.deltas[i].dz,
                3 => &mut out.deltas[i].dw,
                4 => &mut out.deltas[i].dh,
                _ => &mut out.deltas[i].dd,
            },
            Slot::Emb(i, k) => &mut out.embeddings[i].0[k],
        }
    }

    fn grad(self, b: &LossBundle) -> f64 {
        match self {
            Slot::Logit(i, k) => b.grad_logits[i][k],
            Slot::Delta(i, k) => b.grad_deltas[i][k],
            Slot::Emb(i, k) => b.grad_embeddings[i].get(k).copied().unwrap_or(0.0),
        }
    }
}

/// Analytic gradient of `term` at `slot`. `full` is the bundle at the real
/// lambda, `unit` the bundle at lambda = 1, used for the similarity term alone.
fn analytic(term: LossTerm, slot: Slot, full: &LossBundle, unit: &LossBundle) -> f64 {
    match (term, slot) {
        (LossTerm::LRpn, _) => slot.grad(full),
        (LossTerm::LCls, Slot::Logit(..)) | (LossTerm::LReg, Slot::Delta(..)) => slot.grad(full),
        (LossTerm::LSim, Slot::Emb(..)) => slot.grad(unit),
        _ => 0.0,
    }
}

struct Worst {
    err: f64,
    batch: usize,
    slot: String,
    analytic: f64,
    numeric: f64,
    checked: usize,
}

pub fn gradcheck(params: &LossParams, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    params.validate()?;
    cfg.validate()?;
    let unit_params = LossParams {
        lambda: 1.0,
        ..params.clone()
    };
    let floor = cfg.abs_tol / cfg.rel_tol;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst: Vec<Worst> = LossTerm::ALL
        .iter()
        .map(|_| Worst {
            err: 0.0,
            batch: 0,
            slot: String::new(),
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        })
        .collect();

    for b in 0..cfg.n_batches {
        let mut batch = random_batch(&mut rng, params, cfg.embed_dim)?;
        let weights = rpn_loss(&batch.as_batch(), params)?.positive_weights;
        let full = rpn_loss_with_weights(&batch.as_batch(), params, &weights)?;
        let unit = rpn_loss_with_weights(&batch.as_batch(), &unit_params, &weights)?;

        let n = batch.anchors.len();
        let slots = (0..n)
            .flat_map(|i| (0..NUM_CLASSES).map(move |k| Slot::Logit(i, k)))
            .chain((0..n).flat_map(|i| (0..6).map(move |k| Slot::Delta(i, k))))
            .chain((0..n).flat_map(|i| (0..cfg.embed_dim).map(move |k| Slot::Emb(i, k))))
            .collect::<Vec<_>>();

        for slot in slots {
            let x0 = *slot.get_mut(&mut batch.outputs);
            *slot.get_mut(&mut batch.outputs) = x0 + cfg.step;
            let plus = rpn_loss_with_weights(&batch.as_batch(), params, &weights)?;
            *slot.get_mut(&mut batch.outputs) = x0 - cfg.step;
            let minus = rpn_loss_with_weights(&batch.as_batch(), params, &weights)?;
            *slot.get_mut(&mut batch.outputs) = x0;

            for (t, term) in LossTerm::ALL.into_iter().enumerate() {
                let numeric = (term.value(&plus) - term.value(&minus)) / (2.0 * cfg.step);
                let mut a = analytic(term, slot, &full, &unit);
                if cfg.corrupt == Some(term) {
                    a *= 1.01;
                }
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                let w = &mut worst[t];
                w.checked += 1;
                if err > w.err || w.slot.is_empty() {
                    w.err = err;
                    w.batch = b;
                    w.slot = slot.describe();
                    w.analytic = a;
                    w.numeric = numeric;
                }
            }
        }
    }

    let terms = LossTerm::ALL
        .into_iter()
        .zip(worst)
        .map(|(term, w)| TermReport {
            term,
            max_rel_error: w.err,
            worst_batch: w.batch,
            worst_component: w.slot,
            analytic: w.analytic,
            numeric: w.numeric,
            components_checked: w.checked,
            passed: w.err < cfg.rel_tol,
        })
        .collect();
    Ok(GradcheckReport {
        n_batches: cfg.n_batches,
        terms,
    })
}
