use rand::seq::SliceRandom;

use super::{best_truth, classify_match, integral_images, MatchTarget, TrainConfig};
use crate::detector::{
    apply_deltas, box_delta_target, sigmoid, softplus, AnchorSpec, Descriptor, FeatureIntegral, ProposalNetParams,
    PARAM_DIM,
};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoxXYXY};
use crate::rng::stream;
use crate::synthworld::{DetDataset, SceneObject};

/// Training label of one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorTarget {
    Foreground { truth: usize, deltas: [f64; 4] },
    Background,
    Ignore,
}

/// IoU-threshold labels, plus the best anchor of every truth box forced to
/// foreground so that elongated objects are not left without a positive.
pub fn anchor_targets(anchors: &[BoxXYXY], truth: &[SceneObject], cfg: &TrainConfig) -> Vec<AnchorTarget> {
    let tb: Vec<BoxXYXY> = truth.iter().map(|o| o.bbox).collect();
    let mut best: Vec<Option<(usize, f64)>> = anchors.iter().map(|a| best_truth(a, &tb)).collect();
    for (t, tbox) in tb.iter().enumerate() {
        let mut top: Option<(usize, f64)> = None;
        for (i, a) in anchors.iter().enumerate() {
            let v = iou(a, tbox);
            if v > 0.0 && top.is_none_or(|(_, tv)| v > tv) {
                top = Some((i, v));
            }
        }
        if let Some((i, v)) = top {
            if v < cfg.match_iou_fg {
                best[i] = Some((t, cfg.match_iou_fg.max(v)));
            }
        }
    }
    anchors
        .iter()
        .zip(best)
        .map(|(a, b)| match classify_match(b, cfg.match_iou_fg, cfg.match_iou_bg) {
            MatchTarget::Foreground { truth, .. } => AnchorTarget::Foreground {
                truth,
                deltas: clamp_deltas(box_delta_target(a, &tb[truth])),
            },
            MatchTarget::Background { .. } => AnchorTarget::Background,
            MatchTarget::Ignore { .. } => AnchorTarget::Ignore,
        })
        .collect()
}

fn clamp_deltas(mut d: [f64; 4]) -> [f64; 4] {
    d[2] = d[2].clamp(-1.0, 1.0);
    d[3] = d[3].clamp(-1.0, 1.0);
    d
}

fn augmented(d: &Descriptor) -> [f64; PARAM_DIM] {
    let mut x = [1.0; PARAM_DIM];
    x[..d.len()].copy_from_slice(d);
    x
}

fn dot(w: &[f64], x: &[f64; PARAM_DIM]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

#[derive(Default)]
struct Head {
    grad: Vec<f64>,
    n: usize,
    loss: f64,
}

impl Head {
    fn new() -> Self {
        Head {
            grad: vec![0.0; PARAM_DIM],
            n: 0,
            loss: 0.0,
        }
    }

    fn add(&mut self, coef: f64, x: &[f64; PARAM_DIM], loss: f64) {
        for (g, v) in self.grad.iter_mut().zip(x) {
            *g += coef * v;
        }
        self.n += 1;
        self.loss += loss;
    }

    /// Apply the mean gradient; returns the mean loss.
    fn step(&self, w: &mut [f64], lr: f64) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let n = self.n as f64;
        for (wi, g) in w.iter_mut().zip(&self.grad) {
            *wi -= lr * g / n;
        }
        self.loss / n
    }
}

struct ImageData<'a> {
    integral: FeatureIntegral,
    truth: Vec<BoxXYXY>,
    fg: Vec<(usize, &'a SceneObject, [f64; 4])>,
    bg: Vec<usize>,
}

/// Class-agnostic training of the proposal network from zero weights.
/// Returns the parameters and the mean loss of every epoch.
pub fn train_proposal_stage(
    datasets: &[DetDataset],
    anchors: &AnchorSpec,
    cfg: &TrainConfig,
) -> Result<(ProposalNetParams, Vec<f64>)> {
    train_from(ProposalNetParams::zeros(), datasets, anchors, cfg)
}

pub(crate) fn train_from(
    mut params: ProposalNetParams,
    datasets: &[DetDataset],
    anchor_spec: &AnchorSpec,
    cfg: &TrainConfig,
) -> Result<(ProposalNetParams, Vec<f64>)> {
    if datasets.iter().all(DetDataset::is_empty) {
        return Err(Error::EmptyDataset("proposal stage has no images".into()));
    }
    let anchors = anchor_spec.generate();
    let mut images: Vec<ImageData<'_>> = Vec::new();
    for d in datasets {
        for (integral, truth) in integral_images(d).into_iter().zip(&d.visible) {
            let targets = anchor_targets(&anchors, truth, cfg);
            let mut fg = Vec::new();
            let mut bg = Vec::new();
            for (i, t) in targets.iter().enumerate() {
                match *t {
                    AnchorTarget::Foreground { truth: ti, deltas } => fg.push((i, &truth[ti], deltas)),
                    AnchorTarget::Background => bg.push(i),
                    AnchorTarget::Ignore => {}
                }
            }
            images.push(ImageData {
                integral,
                truth: truth.iter().map(|o| o.bbox).collect(),
                fg,
                bg,
            });
        }
    }

    let mut log = Vec::with_capacity(cfg.epochs);
    let max_fg = ((cfg.anchors_per_image as f64) * cfg.anchor_fg_fraction).floor() as usize;
    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, "proposal-epoch", epoch as u64);
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut obj = Head::new();
            let mut cls = Head::new();
            let mut loc = Head::new();
            let mut deltas: Vec<Head> = (0..4).map(|_| Head::new()).collect();
            for &ii in batch {
                let img = &images[ii];
                let mut fg = img.fg.clone();
                fg.shuffle(&mut rng);
                fg.truncate(max_fg);
                let mut bg = img.bg.clone();
                bg.shuffle(&mut rng);
                bg.truncate(cfg.anchors_per_image.saturating_sub(fg.len()));
                let samples = fg
                    .iter()
                    .map(|&(i, _, t)| (i, Some(t)))
                    .chain(bg.iter().map(|&i| (i, None)));
                for (ai, target) in samples {
                    let anchor = anchors[ai];
                    let Some((d, _)) = img.integral.describe(&anchor) else {
                        continue;
                    };
                    let x = augmented(&d);
                    let y = if target.is_some() { 1.0 } else { 0.0 };
                    let z = dot(&params.objectness, &x);
                    obj.add(sigmoid(z) - y, &x, softplus(z) - y * z);

                    let pred = params.deltas(&d);
                    if let Some(t) = target {
                        for k in 0..4 {
                            let r = pred[k] - t[k];
                            deltas[k].add(r, &x, 0.5 * r * r);
                        }
                    }

                    let refined = apply_deltas(&anchor, pred, img.integral.size());
                    let (rbox, rd) = match img.integral.describe(&refined) {
                        Some((rd, _)) if refined.is_valid() => (refined, rd),
                        _ => (anchor, d),
                    };
                    let xr = augmented(&rd);
                    let riou = best_truth(&rbox, &img.truth).map_or(0.0, |(_, v)| v);
                    let label = if riou >= cfg.match_iou_fg {
                        Some(1.0)
                    } else if riou < cfg.match_iou_bg {
                        Some(0.0)
                    } else {
                        None
                    };
                    if let Some(yc) = label {
                        let zc = dot(&params.binarycls, &xr);
                        cls.add(sigmoid(zc) - yc, &xr, softplus(zc) - yc * zc);
                    }
                    if target.is_some() {
                        let s = sigmoid(dot(&params.locquality, &xr));
                        let r = s - riou;
                        loc.add(2.0 * r * s * (1.0 - s), &xr, r * r);
                    }
                }
            }
            let lr = cfg.proposal_learning_rate;
            let mut loss = obj.step(&mut params.objectness, lr);
            loss += cls.step(&mut params.binarycls, lr);
            loss += loc.step(&mut params.locquality, lr);
            for (row, h) in params.box_delta.iter_mut().zip(&deltas) {
                loss += h.step(row, lr);
            }
            total += loss;
            batches += 1;
        }
        log.push(if batches > 0 { total / batches as f64 } else { 0.0 });
    }
    params.validate()?;
    Ok((params, log))
}
