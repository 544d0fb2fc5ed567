//! Open-world inference: raw detection against the test vocabulary, prior
//! estimation, probability calibration, score composition and ensembling.

use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{
    classify_region, propose, ClassConfidence, EtaMode, FeatureIntegral, Proposal, ProposeOptions,
};
use crate::error::{Error, Result};
use crate::geometry::{iou, nms_indices, wbf, ScoredDetection, DEFAULT_WBF_IOU};
use crate::labelspace::{embedding_matrix, EmbeddingTable, LabelSpace};
use crate::synthworld::{DetDataset, SyntheticImage};
use crate::training::TrainedSystem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    /// Argmax categories of a first inference pass over the test images.
    #[default]
    FromTestResults,
    /// Visible instance counts of the training sources.
    FromTrainCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Weight of `s_c` in the proposal confidence.
    pub alpha: f64,
    /// Weight of the class probability in the final score.
    pub beta: f64,
    /// Exponent of the prior in calibration.
    pub gamma: f64,
    pub prior_source: PriorSource,
    pub wbf_iou: f64,
    /// Proposals kept per image.
    pub top_k: usize,
    /// Per-category suppression threshold.
    pub nms_iou: f64,
    pub max_detections: usize,
    /// Minimum uncalibrated score for a proposal to count toward the prior.
    pub prior_score_thresh: f64,
    pub calibrate: bool,
    pub eta_mode: EtaMode,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            alpha: 0.3,
            beta: 0.3,
            gamma: 0.6,
            prior_source: PriorSource::FromTestResults,
            wbf_iou: DEFAULT_WBF_IOU,
            top_k: 100,
            nms_iou: 0.5,
            max_detections: 300,
            prior_score_thresh: 0.05,
            calibrate: true,
            eta_mode: EtaMode::Cln,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if !(self.wbf_iou > 0.0 && self.wbf_iou <= 1.0) {
            return Err(Error::Config(format!("wbf_iou must lie in (0, 1], got {}", self.wbf_iou)));
        }
        if self.top_k == 0 || self.max_detections == 0 {
            return Err(Error::Config("top_k and max_detections must be at least 1".into()));
        }
        Ok(())
    }

    fn propose_options(&self) -> ProposeOptions {
        ProposeOptions {
            top_k: self.top_k,
            alpha: self.alpha,
            eta_mode: self.eta_mode,
            ..ProposeOptions::default()
        }
    }
}

/// Proposals of one image with their class probabilities over the test
/// vocabulary; `probs[i][j]` belongs to proposal `i` and category `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub image_id: String,
    pub proposals: Vec<Proposal>,
    pub probs: Vec<Vec<f64>>,
}

/// Raw detections of one system over a whole test set.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDetections {
    pub space: LabelSpace,
    pub images: Vec<RawImage>,
}

fn confidence_matrix(system: &TrainedSystem, table: &EmbeddingTable) -> Result<Option<Array2<f64>>> {
    if system.decoupled {
        Ok(None)
    } else {
        embedding_matrix(&system.train_space(), table).map(Some)
    }
}

fn detect_with(
    system: &TrainedSystem,
    image: &SyntheticImage,
    test_emb: &Array2<f64>,
    conf_emb: Option<&Array2<f64>>,
    cfg: &InferenceConfig,
) -> RawImage {
    let integral = FeatureIntegral::new(image);
    let conf = match conf_emb {
        Some(emb) => ClassConfidence::Specific { roi: &system.roi, emb },
        None => ClassConfidence::Agnostic,
    };
    let anchors = system.anchors.generate();
    let proposals = propose(&integral, &system.proposal, &anchors, &cfg.propose_options(), conf);
    let probs = proposals
        .iter()
        .map(|p| classify_region(&p.pooled_feature, &system.roi, test_emb))
        .collect();
    RawImage {
        image_id: image.image_id.clone(),
        proposals,
        probs,
    }
}

/// Proposals and per-category probabilities for one image. Only the test
/// vocabulary is consulted for classification.
pub fn detect_raw(
    system: &TrainedSystem,
    image: &SyntheticImage,
    test_space: &LabelSpace,
    table: &EmbeddingTable,
    cfg: &InferenceConfig,
) -> Result<RawImage> {
    let test_emb = embedding_matrix(test_space, table)?;
    let conf = confidence_matrix(system, table)?;
    Ok(detect_with(system, image, &test_emb, conf.as_ref(), cfg))
}

/// [`detect_raw`] over every image, in parallel.
pub fn detect_dataset(
    system: &TrainedSystem,
    images: &[SyntheticImage],
    test_space: &LabelSpace,
    table: &EmbeddingTable,
    cfg: &InferenceConfig,
) -> Result<RawDetections> {
    let test_emb = embedding_matrix(test_space, table)?;
    let conf = confidence_matrix(system, table)?;
    let images = images
        .par_iter()
        .map(|img| detect_with(system, img, &test_emb, conf.as_ref(), cfg))
        .collect();
    Ok(RawDetections {
        space: test_space.clone(),
        images,
    })
}

/// Estimated category frequencies used to de-bias class probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorTable {
    pub pi: BTreeMap<String, f64>,
    pub provenance: PriorSource,
    pub gamma: f64,
    pub floor: f64,
    /// Set when every count was zero and the uniform prior was substituted.
    pub uniform_fallback: bool,
    /// Counts the table was built from.
    pub counts: BTreeMap<String, f64>,
}

impl PriorTable {
    pub fn get(&self, key: &str) -> Result<f64> {
        self.pi.get(key).copied().ok_or_else(|| Error::UnknownCategory(key.to_string()))
    }
}

/// Default floor `1 / (10 |L|)`.
pub fn prior_floor(n_categories: usize) -> f64 {
    1.0 / (10.0 * n_categories.max(1) as f64)
}

/// Normalize counts over `space` and apply the floor. Categories missing from
/// `counts` count zero.
pub fn estimate_prior(
    counts: &BTreeMap<String, f64>,
    space: &LabelSpace,
    gamma: f64,
    provenance: PriorSource,
) -> Result<PriorTable> {
    if space.is_empty() {
        return Err(Error::EmptyDataset("prior over an empty vocabulary".into()));
    }
    let floor = prior_floor(space.len());
    let used: BTreeMap<String, f64> = space
        .iter()
        .map(|k| (k.to_string(), counts.get(k).copied().unwrap_or(0.0)))
        .collect();
    if used.values().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(Error::Format("prior counts must be finite and non-negative".into()));
    }
    let total: f64 = used.values().sum();
    let uniform_fallback = total <= 0.0;
    if uniform_fallback {
        log::warn!("all prior counts are zero; using a uniform prior");
    }
    let pi = used
        .iter()
        .map(|(k, c)| {
            let p = if uniform_fallback {
                1.0 / space.len() as f64
            } else {
                c / total
            };
            (k.clone(), p.max(floor))
        })
        .collect();
    Ok(PriorTable {
        pi,
        provenance,
        gamma,
        floor,
        uniform_fallback,
        counts: used,
    })
}

/// Per category, the number of proposals whose most probable category it is
/// and whose uncalibrated score reaches `thresh`.
pub fn count_argmax(raw: &RawDetections, beta: f64, thresh: f64) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, f64> = raw.space.iter().map(|k| (k.to_string(), 0.0)).collect();
    for img in &raw.images {
        for (prop, probs) in img.proposals.iter().zip(&img.probs) {
            let Some((j, p)) = probs
                .iter()
                .copied()
                .enumerate()
                .fold(None, |best: Option<(usize, f64)>, (j, p)| match best {
                    Some((_, bp)) if bp >= p => best,
                    _ => Some((j, p)),
                })
            else {
                continue;
            };
            if final_score(p, prop.eta, beta) >= thresh {
                *counts.get_mut(&raw.space.keys()[j]).expect("key from space") += 1.0;
            }
        }
    }
    counts
}

/// Visible instance counts summed over training sources.
pub fn train_counts(datasets: &[DetDataset]) -> BTreeMap<String, f64> {
    let mut counts = BTreeMap::new();
    for d in datasets {
        for (k, c) in d.instance_counts() {
            *counts.entry(k).or_insert(0.0) += c as f64;
        }
    }
    counts
}

/// `p / pi^gamma`, unclamped.
pub fn calibrate_value(p: f64, pi: f64, gamma: f64) -> f64 {
    p / pi.powf(gamma)
}

/// Calibrated probability of category `key` under `prior`.
pub fn calibrate(p: f64, prior: &PriorTable, key: &str) -> Result<f64> {
    Ok(calibrate_value(p, prior.get(key)?, prior.gamma))
}

/// `p^beta * eta^(1 - beta)`, with `0^0 = 1`. Exactly `p` when `p == eta`,
/// which two rounded powers would not guarantee.
pub fn final_score(p: f64, eta: f64, beta: f64) -> f64 {
    if p == eta {
        return p;
    }
    p.powf(beta) * eta.powf(1.0 - beta)
}

/// Detections of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDetections {
    pub image_id: String,
    pub detections: Vec<ScoredDetection>,
}

/// Descending score, then category key; stable on the input order.
fn sort_detections(dets: &mut [ScoredDetection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.category_key.cmp(&b.category_key)));
}

/// Score every (proposal, category) pair, suppress per category and keep the
/// best `max_detections`.
pub fn postprocess(raw: &RawImage, space: &LabelSpace, prior: Option<&PriorTable>, cfg: &InferenceConfig) -> Result<ImageDetections> {
    let n = raw.proposals.len();
    let divisors: Vec<f64> = match prior {
        Some(p) => space
            .iter()
            .map(|k| p.get(k).map(|pi| pi.powf(p.gamma)))
            .collect::<Result<_>>()?,
        None => vec![1.0; space.len()],
    };
    let mut overlap = vec![0.0; n * n];
    for a in 0..n {
        for b in a + 1..n {
            let v = iou(&raw.proposals[a].bbox, &raw.proposals[b].bbox);
            overlap[a * n + b] = v;
            overlap[b * n + a] = v;
        }
    }
    let mut dets = Vec::new();
    for (j, key) in space.iter().enumerate() {
        let scores: Vec<f64> = raw
            .proposals
            .iter()
            .zip(&raw.probs)
            .map(|(prop, probs)| final_score(probs[j] / divisors[j], prop.eta, cfg.beta))
            .collect();
        let mut order: Vec<usize> = (0..n).filter(|&i| scores[i].is_finite()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        for i in nms_indices(&order, |a, b| overlap[a * n + b], cfg.nms_iou) {
            dets.push(ScoredDetection::new(raw.proposals[i].bbox, scores[i], key));
        }
    }
    sort_detections(&mut dets);
    dets.truncate(cfg.max_detections);
    Ok(ImageDetections {
        image_id: raw.image_id.clone(),
        detections: dets,
    })
}

/// Detections of a whole test set plus the priors that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenWorldOutput {
    pub images: Vec<ImageDetections>,
    /// One per system, by system name.
    pub priors: Vec<(String, PriorTable)>,
}

/// Raw detection of one system followed by the two-pass calibrated
/// post-processing.
pub fn run_single(
    system: &TrainedSystem,
    raw: &RawDetections,
    train_sets: &[DetDataset],
    cfg: &InferenceConfig,
) -> Result<(Vec<ImageDetections>, PriorTable)> {
    let counts = match cfg.prior_source {
        PriorSource::FromTestResults => count_argmax(raw, cfg.beta, cfg.prior_score_thresh),
        PriorSource::FromTrainCounts => train_counts(train_sets),
    };
    let prior = estimate_prior(&counts, &raw.space, cfg.gamma, cfg.prior_source)
        .map_err(|e| e.in_stage(&format!("prior for {}", system.name)))?;
    let applied = cfg.calibrate.then_some(&prior);
    let images = raw
        .images
        .par_iter()
        .map(|img| postprocess(img, &raw.space, applied, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok((images, prior))
}

/// Full open-world pipeline. Several systems (the separate structure) are
/// each run on their own and fused per image with weighted boxes fusion.
pub fn run_open_world(
    systems: &[TrainedSystem],
    test: &DetDataset,
    test_space: &LabelSpace,
    table: &EmbeddingTable,
    train_sets: &[DetDataset],
    cfg: &InferenceConfig,
) -> Result<OpenWorldOutput> {
    cfg.validate()?;
    if systems.is_empty() {
        return Err(Error::Config("no systems to run".into()));
    }
    let raws = systems
        .iter()
        .map(|s| detect_dataset(s, &test.images, test_space, table, cfg))
        .collect::<Result<Vec<_>>>()?;
    run_open_world_raw(systems, &raws, train_sets, cfg)
}

/// [`run_open_world`] from precomputed raw detections, one per system.
pub fn run_open_world_raw(
    systems: &[TrainedSystem],
    raws: &[RawDetections],
    train_sets: &[DetDataset],
    cfg: &InferenceConfig,
) -> Result<OpenWorldOutput> {
    let mut per_system = Vec::with_capacity(systems.len());
    let mut priors = Vec::with_capacity(systems.len());
    for (s, raw) in systems.iter().zip(raws) {
        let (images, prior) = run_single(s, raw, train_sets, cfg)?;
        per_system.push(images);
        priors.push((s.name.clone(), prior));
    }
    if per_system.len() == 1 {
        return Ok(OpenWorldOutput {
            images: per_system.pop().expect("one system"),
            priors,
        });
    }
    let n_images = per_system[0].len();
    let images = (0..n_images)
        .map(|i| {
            let lists: Vec<Vec<ScoredDetection>> = per_system
                .iter()
                .zip(systems)
                .map(|(imgs, s)| {
                    imgs[i]
                        .detections
                        .iter()
                        .cloned()
                        .map(|d| d.with_source(s.name.clone()))
                        .collect()
                })
                .collect();
            let mut fused = wbf(&lists, cfg.wbf_iou)?;
            sort_detections(&mut fused);
            fused.truncate(cfg.max_detections);
            Ok(ImageDetections {
                image_id: per_system[0][i].image_id.clone(),
                detections: fused,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OpenWorldOutput { images, priors })
}

/// One JSON object per line.
pub fn to_jsonl(images: &[ImageDetections]) -> Result<String> {
    let mut out = String::new();
    for img in images {
        out.push_str(&serde_json::to_string(img)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parse JSON Lines detections; blank lines are skipped.
pub fn parse_jsonl(text: &str) -> Result<Vec<ImageDetections>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let mut img: ImageDetections =
                serde_json::from_str(line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
            img.detections.retain(ScoredDetection::is_well_formed);
            Ok(img)
        })
        .collect()
}
