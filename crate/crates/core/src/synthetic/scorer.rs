use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxDelta;
use crate::losses::{ClassScores, Embedding, NUM_CLASSES};

use super::features::{AnchorFeatures, FEATURE_DIM};

/// Standardized features are clamped to this magnitude.
pub const FEATURE_CLIP: f64 = 3.0;

/// Three linear heads over standardized anchor features: class logits,
/// box deltas and an embedding. Weight matrices are row-major, one row per
/// output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyScorer {
    pub embed_dim: usize,
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub w_cls: Vec<f64>,
    pub b_cls: Vec<f64>,
    pub w_reg: Vec<f64>,
    pub b_reg: Vec<f64>,
    pub w_emb: Vec<f64>,
    pub b_emb: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerOutput {
    pub scores: ClassScores,
    pub delta: BoxDelta,
    pub embedding: Embedding,
}

impl ToyScorer {
    /// All-zero heads with identity feature normalization.
    pub fn zeros(embed_dim: usize) -> Self {
        Self {
            embed_dim,
            feature_mean: vec![0.0; FEATURE_DIM],
            feature_scale: vec![1.0; FEATURE_DIM],
            w_cls: vec![0.0; NUM_CLASSES * FEATURE_DIM],
            b_cls: vec![0.0; NUM_CLASSES],
            w_reg: vec![0.0; 6 * FEATURE_DIM],
            b_reg: vec![0.0; 6],
            w_emb: vec![0.0; embed_dim * FEATURE_DIM],
            b_emb: vec![0.0; embed_dim],
        }
    }

    /// Zero class and box heads, Gaussian embedding head (std 1/sqrt(F)).
    pub fn init(feature_mean: Vec<f64>, feature_scale: Vec<f64>, embed_dim: usize, seed: u64) -> Result<Self> {
        if feature_mean.len() != FEATURE_DIM || feature_scale.len() != FEATURE_DIM {
            return Err(Error::config(format!("feature statistics must have {FEATURE_DIM} entries")));
        }
        if feature_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::config("feature scales must be positive"));
        }
        if embed_dim == 0 {
            return Err(Error::config("embedding dimension must be >= 1"));
        }
        let mut s = Self::zeros(embed_dim);
        s.feature_mean = feature_mean;
        s.feature_scale = feature_scale;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (FEATURE_DIM as f64).sqrt()).expect("valid std");
        for w in s.w_emb.iter_mut() {
            *w = normal.sample(&mut rng);
        }
        Ok(s)
    }

    pub fn param_count(&self) -> usize {
        FEATURE_DIM * (NUM_CLASSES + 6 + self.embed_dim) + NUM_CLASSES + 6 + self.embed_dim
    }

    pub fn is_finite(&self) -> bool {
        [&self.w_cls, &self.b_cls, &self.w_reg, &self.b_reg, &self.w_emb, &self.b_emb]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.feature_mean.len() == FEATURE_DIM
            && self.feature_scale.len() == FEATURE_DIM
            && self.w_cls.len() == NUM_CLASSES * FEATURE_DIM
            && self.b_cls.len() == NUM_CLASSES
            && self.w_reg.len() == 6 * FEATURE_DIM
            && self.b_reg.len() == 6
            && self.w_emb.len() == self.embed_dim * FEATURE_DIM
            && self.b_emb.len() == self.embed_dim;
        if !ok {
            return Err(Error::config("scorer parameter shapes do not match its dimensions"));
        }
        if !self.is_finite() {
            return Err(Error::config("scorer parameters must be finite"));
        }
        Ok(())
    }

    pub fn normalize(&self, f: &AnchorFeatures) -> [f64; FEATURE_DIM] {
        std::array::from_fn(|k| {
            ((f.0[k] - self.feature_mean[k]) / self.feature_scale[k]).clamp(-FEATURE_CLIP, FEATURE_CLIP)
        })
    }

    fn affine<const N: usize>(w: &[f64], b: &[f64], x: &[f64; FEATURE_DIM]) -> [f64; N] {
        let mut out = [0.0; N];
        for (r, o) in out.iter_mut().enumerate() {
            let row = &w[r * FEATURE_DIM..(r + 1) * FEATURE_DIM];
            *o = b[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        out
    }

    pub fn logits(&self, x: &[f64; FEATURE_DIM]) -> ClassScores {
        ClassScores::new(Self::affine::<NUM_CLASSES>(&self.w_cls, &self.b_cls, x))
    }

    pub fn delta(&self, x: &[f64; FEATURE_DIM]) -> BoxDelta {
        BoxDelta::from_array(Self::affine::<6>(&self.w_reg, &self.b_reg, x))
    }

    pub fn embedding(&self, x: &[f64; FEATURE_DIM]) -> Embedding {
        let mut z = self.b_emb.clone();
        for (r, o) in z.iter_mut().enumerate() {
            let row = &self.w_emb[r * FEATURE_DIM..(r + 1) * FEATURE_DIM];
            *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        Embedding(z)
    }

    pub fn forward(&self, f: &AnchorFeatures) -> ScorerOutput {
        let x = self.normalize(f);
        ScorerOutput {
            scores: self.logits(&x),
            delta: self.delta(&x),
            embedding: self.embedding(&x),
        }
    }
}
