use ndarray::{Array1, Array2, ArrayView1};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sigmoid;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Scale of the identity-like projection used for aligned initialization.
pub const ALIGNED_INIT_SCALE: f64 = 0.05;
const INIT_NOISE: f64 = 0.05;

/// Starting point for the RoI projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RoiInit {
    /// No prior alignment between region features and embeddings.
    Random,
    /// Identity plus noise: region features already point at their
    /// category embedding.
    #[default]
    Aligned,
}

/// Linear map from pooled region features into embedding space, a shared
/// score offset, and the sigmoid temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct RoIClassifierParams {
    /// `E x D`.
    pub projection: Array2<f64>,
    /// Added to every `z . e_j` before the temperature. It does not depend
    /// on the category, so it carries over to unseen categories.
    pub bias: f64,
    pub tau: f64,
}

impl RoIClassifierParams {
    pub fn new(projection: Array2<f64>, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("tau {tau} must be positive")));
        }
        if projection.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("projection has non-finite entries".into()));
        }
        Ok(RoIClassifierParams {
            projection,
            bias: 0.0,
            tau,
        })
    }

    pub fn with_bias(mut self, bias: f64) -> Result<Self> {
        if !bias.is_finite() {
            return Err(Error::Format("bias must be finite".into()));
        }
        self.bias = bias;
        Ok(self)
    }

    pub fn init(kind: RoiInit, embed_dim: usize, feature_dim: usize, tau: f64, rng: &mut Rng) -> Result<Self> {
        let noise = Normal::new(0.0, INIT_NOISE).expect("valid std");
        let projection = match kind {
            RoiInit::Aligned => Array2::from_shape_fn((embed_dim, feature_dim), |(i, j)| {
                let id = if i == j { 1.0 } else { 0.0 };
                ALIGNED_INIT_SCALE * (id + noise.sample(rng))
            }),
            RoiInit::Random => {
                let std = ALIGNED_INIT_SCALE / (feature_dim as f64).sqrt();
                let n = Normal::new(0.0, std).expect("valid std");
                Array2::from_shape_fn((embed_dim, feature_dim), |_| n.sample(rng))
            }
        };
        Self::new(projection, tau)
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.ncols()
    }

    /// Region embedding `z = projection * pooled`.
    pub fn embed(&self, pooled: &[f64]) -> Array1<f64> {
        self.projection.dot(&ArrayView1::from(pooled))
    }
}

/// `(z . e_j + bias) / tau` for every row `e_j` of `emb`.
pub fn region_logits(pooled: &[f64], params: &RoIClassifierParams, emb: &Array2<f64>) -> Vec<f64> {
    let z = params.embed(pooled);
    emb.dot(&z).iter().map(|v| (v + params.bias) / params.tau).collect()
}

/// Independent per-category sigmoid probabilities.
pub fn classify_region(pooled: &[f64], params: &RoIClassifierParams, emb: &Array2<f64>) -> Vec<f64> {
    region_logits(pooled, params, emb).into_iter().map(sigmoid).collect()
}
