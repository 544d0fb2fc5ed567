use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::classifier::{classify_region, RoIClassifierParams};
use super::features::{Descriptor, FeatureIntegral, DESCRIPTOR_DIM};
use super::{sigmoid, EtaMode};
use crate::error::{Error, Result};
use crate::geometry::{iou, nms_indices, BoxXYXY};

/// Descriptor length plus the bias term.
pub const PARAM_DIM: usize = DESCRIPTOR_DIM + 1;
const MAX_LOG_SCALE: f64 = 1.0;

/// Linear heads of the class-agnostic localization network. Each head reads
/// a region descriptor followed by a constant 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalNetParams {
    /// Anchor objectness, produces `s_r1`.
    pub objectness: Vec<f64>,
    /// Localization quality of the refined box, produces `s_r2`.
    pub locquality: Vec<f64>,
    /// Binary class-agnostic classification of the refined box, produces `s_c`.
    pub binarycls: Vec<f64>,
    /// Four rows predicting `(dx, dy, dlogw, dlogh)`.
    pub box_delta: Vec<Vec<f64>>,
}

impl Default for ProposalNetParams {
    fn default() -> Self {
        Self::zeros()
    }
}

impl ProposalNetParams {
    pub fn zeros() -> Self {
        ProposalNetParams {
            objectness: vec![0.0; PARAM_DIM],
            locquality: vec![0.0; PARAM_DIM],
            binarycls: vec![0.0; PARAM_DIM],
            box_delta: vec![vec![0.0; PARAM_DIM]; 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let heads = [&self.objectness, &self.locquality, &self.binarycls];
        let rows = heads.into_iter().chain(self.box_delta.iter());
        if self.box_delta.len() != 4 {
            return Err(Error::Dimension {
                expected: 4,
                actual: self.box_delta.len(),
            });
        }
        for r in rows {
            if r.len() != PARAM_DIM {
                return Err(Error::Dimension {
                    expected: PARAM_DIM,
                    actual: r.len(),
                });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format("proposal parameters must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn objectness_logit(&self, d: &Descriptor) -> f64 {
        linear(&self.objectness, d)
    }

    pub fn locquality_logit(&self, d: &Descriptor) -> f64 {
        linear(&self.locquality, d)
    }

    pub fn binarycls_logit(&self, d: &Descriptor) -> f64 {
        linear(&self.binarycls, d)
    }

    pub fn deltas(&self, d: &Descriptor) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (o, row) in out.iter_mut().zip(&self.box_delta) {
            *o = linear(row, d);
        }
        out
    }
}

pub(crate) fn linear(w: &[f64], d: &Descriptor) -> f64 {
    w[..DESCRIPTOR_DIM].iter().zip(d).map(|(a, b)| a * b).sum::<f64>() + w[DESCRIPTOR_DIM]
}

/// Regression target taking `from` onto `to`.
pub fn box_delta_target(from: &BoxXYXY, to: &BoxXYXY) -> [f64; 4] {
    let (fx, fy) = from.center();
    let (tx, ty) = to.center();
    [
        (tx - fx) / from.width(),
        (ty - fy) / from.height(),
        (to.width() / from.width()).ln(),
        (to.height() / from.height()).ln(),
    ]
}

/// Apply `(dx, dy, dlogw, dlogh)` and clip to the image. Log-scale terms are
/// clamped to `[-1, 1]`.
pub fn apply_deltas(b: &BoxXYXY, deltas: [f64; 4], image_size: usize) -> BoxXYXY {
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    let nx = cx + deltas[0] * w;
    let ny = cy + deltas[1] * h;
    let nw = w * deltas[2].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    let nh = h * deltas[3].clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE).exp();
    BoxXYXY::from_center(nx, ny, nw, nh).clip(image_size as f64)
}

/// A scored, refined region.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BoxXYXY,
    pub anchor: BoxXYXY,
    pub s_r1: f64,
    pub s_r2: f64,
    pub s_c: f64,
    pub eta: f64,
    pub pooled_feature: Vec<f64>,
}

/// Where `s_c` comes from.
#[derive(Debug, Clone, Copy)]
pub enum ClassConfidence<'a> {
    /// The binary class-agnostic head.
    Agnostic,
    /// The best class-specific probability over a fixed vocabulary, as in a
    /// detector whose proposal confidence shares the classification head.
    Specific {
        roi: &'a RoIClassifierParams,
        emb: &'a Array2<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposeOptions {
    pub top_k: usize,
    /// Anchors kept after objectness ranking, as a multiple of `top_k`.
    pub pre_nms_factor: usize,
    pub nms_iou: f64,
    pub alpha: f64,
    pub eta_mode: EtaMode,
}

impl Default for ProposeOptions {
    fn default() -> Self {
        ProposeOptions {
            top_k: 100,
            pre_nms_factor: 4,
            nms_iou: 0.7,
            alpha: 0.3,
            eta_mode: EtaMode::Cln,
        }
    }
}

/// Score every anchor, refine the best, rescore on the refined box, fuse the
/// confidences and keep the `top_k` survivors of class-agnostic NMS.
pub fn propose(
    integral: &FeatureIntegral,
    params: &ProposalNetParams,
    anchors: &[BoxXYXY],
    opts: &ProposeOptions,
    confidence: ClassConfidence<'_>,
) -> Vec<Proposal> {
    let size = integral.size();
    let mut scored: Vec<(usize, f64, Descriptor)> = anchors
        .iter()
        .enumerate()
        .filter_map(|(i, a)| {
            let (d, _) = integral.describe(a)?;
            Some((i, sigmoid(params.objectness_logit(&d)), d))
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(opts.top_k.saturating_mul(opts.pre_nms_factor.max(1)));

    let mut proposals: Vec<Proposal> = scored
        .into_iter()
        .filter_map(|(i, s_r1, d)| {
            let anchor = anchors[i];
            let refined = apply_deltas(&anchor, params.deltas(&d), size);
            let (bbox, (desc, pooled)) = match integral.describe(&refined) {
                Some(x) if refined.is_valid() => (refined, x),
                _ => (anchor, integral.describe(&anchor)?),
            };
            let s_r2 = sigmoid(params.locquality_logit(&desc));
            let s_c = match confidence {
                ClassConfidence::Agnostic => sigmoid(params.binarycls_logit(&desc)),
                ClassConfidence::Specific { roi, emb } => classify_region(&pooled, roi, emb)
                    .into_iter()
                    .fold(0.0, f64::max),
            };
            let eta = opts.eta_mode.eta(s_c, s_r1, s_r2, opts.alpha);
            Some(Proposal {
                bbox,
                anchor,
                s_r1,
                s_r2,
                s_c,
                eta,
                pooled_feature: pooled,
            })
        })
        .collect();

    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| proposals[b].eta.total_cmp(&proposals[a].eta).then(a.cmp(&b)));
    let kept = nms_indices(&order, |a, b| iou(&proposals[a].bbox, &proposals[b].bbox), opts.nms_iou);
    let mut out = Vec::with_capacity(opts.top_k.min(kept.len()));
    for i in kept.into_iter().take(opts.top_k) {
        out.push(std::mem::replace(&mut proposals[i], placeholder()));
    }
    out
}

fn placeholder() -> Proposal {
    let z = BoxXYXY::from([0.0; 4]);
    Proposal {
        bbox: z,
        anchor: z,
        s_r1: 0.0,
        s_r2: 0.0,
        s_c: 0.0,
        eta: 0.0,
        pooled_feature: Vec::new(),
    }
}
