//! Training of the proposal network and the embedding classifier over
//! several sources with heterogeneous label spaces.
//!
//! The proposal stage never sees class labels. The classification stage sees
//! frozen proposals (decoupled) or the proposals of the current epoch (joint).
//! How the sources are combined is the [`Structure`]: one model per source,
//! one model over the merged vocabulary, or one shared model whose loss for
//! each image is restricted to the vocabulary of that image's source.

mod proposal_stage;
mod pseudo;
mod roi_stage;

pub use proposal_stage::{anchor_targets, train_proposal_stage, AnchorTarget};
pub use pseudo::{pseudo_label, pseudo_label_from_detections};
pub use roi_stage::{
    collect_proposals, roi_loss_and_grad, sample_negatives, train_roi_stage, LossScope, RoiLossGrad, RoiSample,
};

use serde::{Deserialize, Serialize};

use crate::detector::{
    propose, AnchorSpec, ClassConfidence, EtaMode, FeatureIntegral, ProposalNetParams, ProposeOptions,
    RoIClassifierParams, RoiInit,
};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoxXYXY};
use crate::labelspace::{embedding_matrix, union_spaces, EmbeddingTable, LabelSpace};
use crate::rng::stream;
use crate::synthworld::{DetDataset, SceneObject};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Separate,
    Unified,
    Partitioned,
}

impl Structure {
    pub fn name(self) -> &'static str {
        match self {
            Structure::Separate => "separate",
            Structure::Unified => "unified",
            Structure::Partitioned => "partitioned",
        }
    }
}

impl std::str::FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separate" => Ok(Structure::Separate),
            "unified" => Ok(Structure::Unified),
            "partitioned" => Ok(Structure::Partitioned),
            other => Err(Error::Config(format!("unknown structure `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Step size of the classification stage.
    pub learning_rate: f64,
    /// Step size of the proposal stage.
    pub proposal_learning_rate: f64,
    /// Images per gradient step.
    pub batch_size: usize,
    pub neg_categories_per_roi: usize,
    pub match_iou_fg: f64,
    pub match_iou_bg: f64,
    pub seed: u64,
    pub structure: Structure,
    pub decouple: bool,
    pub roi_init: RoiInit,
    /// Sigmoid temperature of the embedding classifier.
    pub tau: f64,
    /// Frozen proposals per image fed to the classification stage.
    pub proposals_per_image: usize,
    /// Anchors sampled per image in the proposal stage.
    pub anchors_per_image: usize,
    /// Upper bound on the foreground share of sampled anchors.
    pub anchor_fg_fraction: f64,
    /// Regions sampled per image in the classification stage.
    pub rois_per_image: usize,
    /// Upper bound on the foreground share of sampled regions.
    pub roi_fg_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            learning_rate: 5e-4,
            proposal_learning_rate: 0.1,
            batch_size: 8,
            neg_categories_per_roi: 32,
            match_iou_fg: 0.5,
            match_iou_bg: 0.3,
            seed: 0,
            structure: Structure::Partitioned,
            decouple: true,
            roi_init: RoiInit::Aligned,
            tau: 0.01,
            proposals_per_image: 64,
            anchors_per_image: 64,
            anchor_fg_fraction: 0.5,
            rois_per_image: 32,
            roi_fg_fraction: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0 < self.match_iou_bg && self.match_iou_bg < self.match_iou_fg && self.match_iou_fg <= 1.0) {
            return bad(format!(
                "need 0 < match_iou_bg ({}) < match_iou_fg ({}) <= 1",
                self.match_iou_bg, self.match_iou_fg
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("proposal_learning_rate", self.proposal_learning_rate),
            ("tau", self.tau),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("anchor_fg_fraction", self.anchor_fg_fraction),
            ("roi_fg_fraction", self.roi_fg_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.proposals_per_image == 0 || self.anchors_per_image == 0 || self.rois_per_image == 0 {
            return bad("per-image sample sizes must be at least 1".into());
        }
        Ok(())
    }
}

/// Outcome of matching one box against the annotations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatchTarget {
    Foreground { truth: usize, iou: f64 },
    Background { max_iou: f64 },
    Ignore { max_iou: f64 },
}

impl MatchTarget {
    pub fn is_foreground(&self) -> bool {
        matches!(self, MatchTarget::Foreground { .. })
    }
}

/// Best-overlap truth index and its IoU; the first index wins ties.
pub(crate) fn best_truth(b: &BoxXYXY, truth: &[BoxXYXY]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in truth.iter().enumerate() {
        let v = iou(b, t);
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    best
}

pub(crate) fn classify_match(best: Option<(usize, f64)>, fg: f64, bg: f64) -> MatchTarget {
    match best {
        Some((truth, v)) if v >= fg => MatchTarget::Foreground { truth, iou: v },
        Some((_, v)) if v >= bg => MatchTarget::Ignore { max_iou: v },
        Some((_, v)) => MatchTarget::Background { max_iou: v },
        None => MatchTarget::Background { max_iou: 0.0 },
    }
}

/// Foreground when the best IoU reaches `match_iou_fg`, background below
/// `match_iou_bg`, ignored in between.
pub fn match_proposals(boxes: &[BoxXYXY], truth: &[SceneObject], cfg: &TrainConfig) -> Vec<MatchTarget> {
    let tb: Vec<BoxXYXY> = truth.iter().map(|o| o.bbox).collect();
    boxes
        .iter()
        .map(|b| classify_match(best_truth(b, &tb), cfg.match_iou_fg, cfg.match_iou_bg))
        .collect()
}

/// Mean loss of one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub system: String,
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
}

/// A trained detector: proposal network, embedding projection and the label
/// spaces it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedSystem {
    pub name: String,
    pub structure: Structure,
    pub decoupled: bool,
    pub proposal: ProposalNetParams,
    pub roi: RoIClassifierParams,
    pub anchors: AnchorSpec,
    /// Source name and vocabulary of every head. Partitioned systems have one
    /// entry per source sharing the same projection.
    pub heads: Vec<(String, LabelSpace)>,
    pub provenance: TrainConfig,
}

impl TrainedSystem {
    /// Union of all head vocabularies.
    pub fn train_space(&self) -> LabelSpace {
        let spaces: Vec<LabelSpace> = self.heads.iter().map(|(_, s)| s.clone()).collect();
        union_spaces(&spaces)
    }
}

/// Systems plus per-epoch losses.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub systems: Vec<TrainedSystem>,
    pub losses: Vec<EpochLoss>,
}

fn check_sources(datasets: &[DetDataset]) -> Result<()> {
    if datasets.is_empty() || datasets.iter().all(DetDataset::is_empty) {
        return Err(Error::EmptyDataset("no training images".into()));
    }
    for d in datasets {
        d.check_invariants()?;
    }
    Ok(())
}

fn heads_of(datasets: &[DetDataset]) -> Vec<(String, LabelSpace)> {
    datasets.iter().map(|d| (d.name.clone(), d.label_space.clone())).collect()
}

/// Train one system on `datasets` with the given loss scope.
fn train_system(
    name: &str,
    structure: Structure,
    datasets: &[DetDataset],
    scope: LossScope,
    cfg: &TrainConfig,
    table: &EmbeddingTable,
    losses: &mut Vec<EpochLoss>,
) -> Result<TrainedSystem> {
    check_sources(datasets)?;
    let size = datasets.iter().flat_map(|d| &d.images).map(|i| i.size).next().unwrap_or(32);
    let anchors = AnchorSpec::for_size(size);
    let (proposal, roi) = if cfg.decouple {
        let (proposal, plog) = train_proposal_stage(datasets, &anchors, cfg).map_err(|e| e.in_stage("proposal"))?;
        let frozen = collect_proposals(datasets, &proposal, &anchors, cfg, None)?;
        let (roi, rlog) = train_roi_stage(datasets, &frozen, scope, cfg, table).map_err(|e| e.in_stage("roi"))?;
        push_losses(losses, name, "proposal", plog);
        push_losses(losses, name, "roi", rlog);
        (proposal, roi)
    } else {
        train_joint_inner(name, datasets, &anchors, scope, cfg, table, losses).map_err(|e| e.in_stage("joint"))?
    };
    Ok(TrainedSystem {
        name: name.to_string(),
        structure,
        decoupled: cfg.decouple,
        proposal,
        roi,
        anchors,
        heads: heads_of(datasets),
        provenance: cfg.clone(),
    })
}

fn push_losses(out: &mut Vec<EpochLoss>, system: &str, stage: &str, log: Vec<f64>) {
    out.extend(log.into_iter().enumerate().map(|(epoch, loss)| EpochLoss {
        system: system.to_string(),
        stage: stage.to_string(),
        epoch,
        loss,
    }));
}

pub(crate) fn init_roi(cfg: &TrainConfig, table: &EmbeddingTable, feature_dim: usize) -> Result<RoIClassifierParams> {
    RoIClassifierParams::init(
        cfg.roi_init,
        table.dim(),
        feature_dim,
        cfg.tau,
        &mut stream(cfg.seed, "roi-init", 0),
    )
}

/// Both stages trained together. Each epoch takes one pass of proposal
/// updates, then regenerates proposals with the current parameters and takes
/// one pass of classification updates on them. Proposal confidence comes from
/// the class-specific head over the training vocabulary, as in a detector
/// whose proposal and classification stages share one classifier.
fn train_joint_inner(
    name: &str,
    datasets: &[DetDataset],
    anchors: &AnchorSpec,
    scope: LossScope,
    cfg: &TrainConfig,
    table: &EmbeddingTable,
    losses: &mut Vec<EpochLoss>,
) -> Result<(ProposalNetParams, RoIClassifierParams)> {
    let dim = datasets.iter().flat_map(|d| &d.images).map(|i| i.dim).next().unwrap_or(0);
    let mut proposal = ProposalNetParams::zeros();
    let mut roi = init_roi(cfg, table, dim)?;
    let vocab = union_spaces(&datasets.iter().map(|d| d.label_space.clone()).collect::<Vec<_>>());
    let vocab_emb = embedding_matrix(&vocab, table)?;
    let one_epoch = TrainConfig {
        epochs: 1,
        ..cfg.clone()
    };
    for epoch in 0..cfg.epochs {
        let epoch_cfg = TrainConfig {
            seed: crate::rng::stream_seed(cfg.seed, "joint-epoch", epoch as u64),
            ..one_epoch.clone()
        };
        let (p, plog) = proposal_stage::train_from(proposal, datasets, anchors, &epoch_cfg)?;
        proposal = p;
        let conf = ClassConfidence::Specific {
            roi: &roi,
            emb: &vocab_emb,
        };
        let current = collect_proposals(datasets, &proposal, anchors, cfg, Some(conf))?;
        let (r, rlog) = roi_stage::train_from(roi, datasets, &current, scope, &epoch_cfg, table)?;
        roi = r;
        for (stage, log) in [("proposal", plog), ("roi", rlog)] {
            losses.push(EpochLoss {
                system: name.to_string(),
                stage: stage.to_string(),
                epoch,
                loss: log[0],
            });
        }
    }
    Ok((proposal, roi))
}

/// Joint training of both stages over `datasets` with per-source loss masks.
pub fn train_joint(datasets: &[DetDataset], cfg: &TrainConfig, table: &EmbeddingTable) -> Result<TrainRun> {
    let cfg = TrainConfig {
        decouple: false,
        ..cfg.clone()
    };
    build_structure(datasets, &cfg, table)
}

/// Train according to `cfg.structure`: one system per source for
/// `separate`, otherwise a single system.
pub fn build_structure(datasets: &[DetDataset], cfg: &TrainConfig, table: &EmbeddingTable) -> Result<TrainRun> {
    cfg.validate()?;
    check_sources(datasets)?;
    let mut losses = Vec::new();
    let systems = match cfg.structure {
        Structure::Separate => datasets
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let sub = TrainConfig {
                    seed: crate::rng::stream_seed(cfg.seed, "separate", i as u64),
                    ..cfg.clone()
                };
                let name = format!("separate_{}", d.name);
                train_system(
                    &name,
                    Structure::Separate,
                    std::slice::from_ref(d),
                    LossScope::PerSource,
                    &sub,
                    table,
                    &mut losses,
                )
            })
            .collect::<Result<Vec<_>>>()?,
        Structure::Unified => {
            let mut sys = train_system("unified", Structure::Unified, datasets, LossScope::Union, cfg, table, &mut losses)?;
            let merged = union_spaces(&datasets.iter().map(|d| d.label_space.clone()).collect::<Vec<_>>());
            sys.heads = vec![("unified".to_string(), merged)];
            vec![sys]
        }
        Structure::Partitioned => vec![train_system(
            "partitioned",
            Structure::Partitioned,
            datasets,
            LossScope::PerSource,
            cfg,
            table,
            &mut losses,
        )?],
    };
    Ok(TrainRun { systems, losses })
}

/// Proposal options used when building classification-stage inputs.
pub(crate) fn training_propose_options(cfg: &TrainConfig) -> ProposeOptions {
    ProposeOptions {
        top_k: cfg.proposals_per_image,
        eta_mode: EtaMode::Cln,
        ..ProposeOptions::default()
    }
}

pub(crate) fn integral_images(d: &DetDataset) -> Vec<FeatureIntegral> {
    d.images.iter().map(FeatureIntegral::new).collect()
}

pub(crate) fn proposals_for(
    integral: &FeatureIntegral,
    params: &ProposalNetParams,
    anchors: &[BoxXYXY],
    cfg: &TrainConfig,
    conf: Option<ClassConfidence<'_>>,
) -> Vec<BoxXYXY> {
    propose(
        integral,
        params,
        anchors,
        &training_propose_options(cfg),
        conf.unwrap_or(ClassConfidence::Agnostic),
    )
    .into_iter()
    .map(|p| p.bbox)
    .collect()
}
