use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{init_roi, integral_images, match_proposals, proposals_for, MatchTarget, TrainConfig};
use crate::detector::{softplus, sigmoid, AnchorSpec, ClassConfidence, ProposalNetParams, RoIClassifierParams};
use crate::error::{Error, Result};
use crate::geometry::BoxXYXY;
use crate::labelspace::{embedding_matrix, union_spaces, EmbeddingTable, LabelSpace};
use crate::rng::{stream, Rng};
use crate::synthworld::DetDataset;

/// Which categories a region's loss may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    /// Only the vocabulary of the image's own source.
    PerSource,
    /// The merged vocabulary of every source.
    Union,
}

/// One region with its positive category (if any) and sampled negatives, as
/// row indices into the embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiSample {
    pub pooled: Vec<f64>,
    pub positive: Option<usize>,
    pub negatives: Vec<usize>,
}

/// Mean sigmoid loss over a set of regions and its gradients.
#[derive(Debug, Clone)]
pub struct RoiLossGrad {
    pub loss: f64,
    /// With respect to the projection, `E x D`.
    pub grad: Array2<f64>,
    pub bias_grad: f64,
    /// With respect to each embedding row, `|L| x E`.
    pub embedding_grad: Array2<f64>,
}

/// `L = mean_i sum_{j in pos u neg} softplus(l_ij) - y_ij l_ij` with
/// `l_ij = ((W f_i) . e_j + b) / tau`.
pub fn roi_loss_and_grad(params: &RoIClassifierParams, emb: &Array2<f64>, samples: &[RoiSample]) -> RoiLossGrad {
    let (e, d) = params.projection.dim();
    let mut grad = Array2::zeros((e, d));
    let mut embedding_grad = Array2::zeros(emb.dim());
    let mut loss = 0.0;
    let mut bias_grad = 0.0;
    if samples.is_empty() {
        return RoiLossGrad {
            loss,
            grad,
            bias_grad,
            embedding_grad,
        };
    }
    let n = samples.len() as f64;
    for s in samples {
        let f = ArrayView1::from(s.pooled.as_slice());
        let z = params.projection.dot(&f);
        let mut gz = Array1::<f64>::zeros(e);
        let cats = s.positive.iter().map(|&j| (j, 1.0)).chain(s.negatives.iter().map(|&j| (j, 0.0)));
        for (j, y) in cats {
            let row = emb.row(j);
            let l = (row.dot(&z) + params.bias) / params.tau;
            loss += softplus(l) - y * l;
            let r = (sigmoid(l) - y) / params.tau;
            gz.scaled_add(r, &row);
            bias_grad += r / n;
            embedding_grad.row_mut(j).scaled_add(r / n, &z);
        }
        for (i, gi) in gz.iter().enumerate() {
            grad.row_mut(i).scaled_add(gi / n, &f);
        }
    }
    RoiLossGrad {
        loss: loss / n,
        grad,
        bias_grad,
        embedding_grad,
    }
}

/// Uniform sample without replacement of `n` categories from `pool`, never
/// the positive. Asking for at least `|pool| - 1` returns every candidate.
pub fn sample_negatives(pool: &[usize], positive: Option<usize>, n: usize, rng: &mut Rng) -> Vec<usize> {
    let candidates: Vec<usize> = pool.iter().copied().filter(|&j| Some(j) != positive).collect();
    if n >= candidates.len() {
        return candidates;
    }
    index::sample(rng, candidates.len(), n).into_iter().map(|i| candidates[i]).collect()
}

/// Top proposals of every image, per dataset, from a frozen proposal network.
pub fn collect_proposals(
    datasets: &[DetDataset],
    params: &ProposalNetParams,
    anchors: &AnchorSpec,
    cfg: &TrainConfig,
    conf: Option<ClassConfidence<'_>>,
) -> Result<Vec<Vec<Vec<BoxXYXY>>>> {
    let grid = anchors.generate();
    Ok(datasets
        .iter()
        .map(|d| {
            integral_images(d)
                .iter()
                .map(|ig| proposals_for(ig, params, &grid, cfg, conf))
                .collect()
        })
        .collect())
}

struct Region {
    pooled: Vec<f64>,
    /// Row in the merged embedding matrix.
    positive: Option<usize>,
}

struct ImageRegions {
    source: usize,
    fg: Vec<Region>,
    bg: Vec<Region>,
}

/// Train the projection on frozen proposals, starting from the configured
/// initialization. Returns the parameters and the mean loss of every epoch.
pub fn train_roi_stage(
    datasets: &[DetDataset],
    proposals: &[Vec<Vec<BoxXYXY>>],
    scope: LossScope,
    cfg: &TrainConfig,
    table: &EmbeddingTable,
) -> Result<(RoIClassifierParams, Vec<f64>)> {
    let dim = datasets
        .iter()
        .flat_map(|d| &d.images)
        .map(|i| i.dim)
        .next()
        .ok_or_else(|| Error::EmptyDataset("classification stage has no images".into()))?;
    let init = init_roi(cfg, table, dim)?;
    train_from(init, datasets, proposals, scope, cfg, table)
}

pub(crate) fn train_from(
    mut params: RoIClassifierParams,
    datasets: &[DetDataset],
    proposals: &[Vec<Vec<BoxXYXY>>],
    scope: LossScope,
    cfg: &TrainConfig,
    table: &EmbeddingTable,
) -> Result<(RoIClassifierParams, Vec<f64>)> {
    if proposals.len() != datasets.len() {
        return Err(Error::Dimension {
            expected: datasets.len(),
            actual: proposals.len(),
        });
    }
    let spaces: Vec<LabelSpace> = datasets.iter().map(|d| d.label_space.clone()).collect();
    let merged = union_spaces(&spaces);
    let emb = embedding_matrix(&merged, table)?;
    let all: Vec<usize> = (0..merged.len()).collect();
    let pools: Vec<Vec<usize>> = spaces
        .iter()
        .map(|s| match scope {
            LossScope::PerSource => s.iter().filter_map(|k| merged.index_of(k)).collect(),
            LossScope::Union => all.clone(),
        })
        .collect();

    let mut images = Vec::new();
    for (si, (d, props)) in datasets.iter().zip(proposals).enumerate() {
        d.check_invariants()?;
        if props.len() != d.len() {
            return Err(Error::Dimension {
                expected: d.len(),
                actual: props.len(),
            });
        }
        for ((integral, truth), boxes) in integral_images(d).iter().zip(&d.visible).zip(props) {
            let mut candidates = boxes.clone();
            candidates.extend(truth.iter().map(|o| o.bbox));
            let targets = match_proposals(&candidates, truth, cfg);
            let mut regions = ImageRegions {
                source: si,
                fg: Vec::new(),
                bg: Vec::new(),
            };
            for (b, t) in candidates.iter().zip(targets) {
                let Ok(pooled) = integral.pool(b) else {
                    continue;
                };
                match t {
                    MatchTarget::Foreground { truth: ti, .. } => {
                        let key = &truth[ti].category_key;
                        let j = merged.index_of(key).ok_or_else(|| Error::UnknownCategory(key.clone()))?;
                        regions.fg.push(Region {
                            pooled,
                            positive: Some(j),
                        });
                    }
                    MatchTarget::Background { .. } => regions.bg.push(Region { pooled, positive: None }),
                    MatchTarget::Ignore { .. } => {}
                }
            }
            images.push(regions);
        }
    }

    let max_fg = ((cfg.rois_per_image as f64) * cfg.roi_fg_fraction).floor() as usize;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, "roi-epoch", epoch as u64);
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut samples = Vec::new();
            for &ii in batch {
                let img = &images[ii];
                let n_fg = img.fg.len().min(max_fg);
                let n_bg = img.bg.len().min(cfg.rois_per_image - n_fg);
                let fg = index::sample(&mut rng, img.fg.len(), n_fg).into_vec();
                let bg = index::sample(&mut rng, img.bg.len(), n_bg).into_vec();
                let picked = fg.iter().map(|&i| &img.fg[i]).chain(bg.iter().map(|&i| &img.bg[i]));
                for r in picked {
                    let negatives = sample_negatives(&pools[img.source], r.positive, cfg.neg_categories_per_roi, &mut rng);
                    samples.push(RoiSample {
                        pooled: r.pooled.clone(),
                        positive: r.positive,
                        negatives,
                    });
                }
            }
            if samples.is_empty() {
                continue;
            }
            let lg = roi_loss_and_grad(&params, &emb, &samples);
            params.projection.scaled_add(-cfg.learning_rate, &lg.grad);
            params.bias -= cfg.learning_rate * lg.bias_grad;
            total += lg.loss;
            batches += 1;
        }
        log.push(if batches > 0 { total / batches as f64 } else { 0.0 });
    }
    let params = RoIClassifierParams::new(params.projection, params.tau)?.with_bias(params.bias)?;
    Ok((params, log))
}
