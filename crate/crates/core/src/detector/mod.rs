//! The toy two-stage detector: anchors, the class-agnostic localization
//! network, and the embedding classifier over pooled region features.

mod classifier;
mod features;
mod proposal;

pub use classifier::{classify_region, region_logits, RoIClassifierParams, RoiInit, ALIGNED_INIT_SCALE};
pub use features::{cell_rect, pool_feature, CellRect, Descriptor, FeatureIntegral, DESCRIPTOR_DIM};
pub use proposal::{
    apply_deltas, box_delta_target, propose, ClassConfidence, Proposal, ProposalNetParams, ProposeOptions,
    PARAM_DIM,
};

use serde::{Deserialize, Serialize};

use crate::geometry::BoxXYXY;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Geometric weighting of class-agnostic classification and the two
/// localization confidences: `s_c^alpha * (s_r1 * s_r2)^(1 - alpha)`.
///
/// `0^0` is taken as 1, so `alpha = 0` ignores `s_c` entirely.
pub fn cln_score(s_c: f64, s_r1: f64, s_r2: f64, alpha: f64) -> f64 {
    s_c.powf(alpha) * (s_r1 * s_r2).powf(1.0 - alpha)
}

/// How a proposal's confidence is assembled from its three scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EtaMode {
    /// Full geometric fusion of `s_c`, `s_r1`, `s_r2`.
    #[default]
    Cln,
    /// RPN objectness `s_r1` alone.
    ObjectnessOnly,
    /// Localization only, `s_r1 * s_r2`.
    LocalizationOnly,
}

impl EtaMode {
    pub fn eta(self, s_c: f64, s_r1: f64, s_r2: f64, alpha: f64) -> f64 {
        match self {
            EtaMode::Cln => cln_score(s_c, s_r1, s_r2, alpha),
            EtaMode::ObjectnessOnly => s_r1,
            EtaMode::LocalizationOnly => cln_score(s_c, s_r1, s_r2, 0.0),
        }
    }
}

/// Square anchors at several scales on a regular stride, fully inside the
/// image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub scales: Vec<f64>,
    pub stride: f64,
    pub image_size: usize,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        AnchorSpec {
            scales: vec![4.0, 8.0, 16.0],
            stride: 2.0,
            image_size: 32,
        }
    }
}

impl AnchorSpec {
    pub fn for_size(image_size: usize) -> Self {
        AnchorSpec {
            image_size,
            ..AnchorSpec::default()
        }
    }

    /// Anchors ordered by scale, then row, then column.
    pub fn generate(&self) -> Vec<BoxXYXY> {
        let size = self.image_size as f64;
        let mut out = Vec::new();
        for &s in &self.scales {
            if s > size || s <= 0.0 || self.stride <= 0.0 {
                continue;
            }
            let steps = ((size - s) / self.stride).floor() as usize;
            for iy in 0..=steps {
                for ix in 0..=steps {
                    let (x, y) = (ix as f64 * self.stride, iy as f64 * self.stride);
                    out.push(BoxXYXY {
                        x1: x,
                        y1: y,
                        x2: x + s,
                        y2: y + s,
                    });
                }
            }
        }
        out
    }
}
