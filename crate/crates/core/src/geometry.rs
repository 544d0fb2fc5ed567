//! Axis-aligned boxes, overlap, suppression and fusion.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default clustering threshold for [`wbf`].
pub const DEFAULT_WBF_IOU: f64 = 0.55;

/// Box in corner form, `x1 < x2` and `y1 < y2` for a valid box.
///
/// Serialized as a bare `[x1, y1, x2, y2]` array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxXYXY {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BoxXYXY {
    fn from(a: [f64; 4]) -> Self {
        BoxXYXY {
            x1: a[0],
            y1: a[1],
            x2: a[2],
            y2: a[3],
        }
    }
}

impl From<BoxXYXY> for [f64; 4] {
    fn from(b: BoxXYXY) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoxXYXY {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoxXYXY { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox { x1, y1, x2, y2 })
        }
    }

    /// Finite coordinates with strictly positive width and height.
    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        if self.is_valid() {
            self.width() * self.height()
        } else {
            0.0
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxXYXY {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
        }
    }

    /// Clamp every coordinate into `[0, size]`. The result may be degenerate.
    pub fn clip(&self, size: f64) -> Self {
        BoxXYXY {
            x1: self.x1.clamp(0.0, size),
            y1: self.y1.clamp(0.0, size),
            x2: self.x2.clamp(0.0, size),
            y2: self.y2.clamp(0.0, size),
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        self.into()
    }
}

/// Intersection over union. Zero-area or non-finite boxes overlap nothing,
/// themselves included.
pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    if !a.is_valid() || !b.is_valid() {
        return 0.0;
    }
    let iw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih = a.y2.min(b.y2) - a.y1.max(b.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// A categorized, scored box. Scores are non-negative and may exceed 1 once
/// calibrated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
    pub score: f64,
    #[serde(rename = "category")]
    pub category_key: String,
    #[serde(rename = "source", default, skip_serializing_if = "Option::is_none")]
    pub source_tag: Option<String>,
}

impl ScoredDetection {
    pub fn new(bbox: BoxXYXY, score: f64, category_key: impl Into<String>) -> Self {
        ScoredDetection {
            bbox,
            score,
            category_key: category_key.into(),
            source_tag: None,
        }
    }

    pub fn with_source(mut self, tag: impl Into<String>) -> Self {
        self.source_tag = Some(tag.into());
        self
    }

    /// Valid box, finite non-negative score, non-empty category.
    pub fn is_well_formed(&self) -> bool {
        self.bbox.is_valid()
            && self.score.is_finite()
            && self.score >= 0.0
            && !self.category_key.is_empty()
    }
}

/// Parse a JSON array of detections, dropping degenerate entries.
pub fn parse_detections_json(text: &str) -> Result<Vec<ScoredDetection>> {
    let dets: Vec<ScoredDetection> = serde_json::from_str(text)?;
    Ok(dets.into_iter().filter(|d| d.is_well_formed()).collect())
}

/// Descending score, then category key, then input position.
fn detection_order(a: (usize, &ScoredDetection), b: (usize, &ScoredDetection)) -> Ordering {
    b.1.score
        .total_cmp(&a.1.score)
        .then_with(|| a.1.category_key.cmp(&b.1.category_key))
        .then_with(|| a.0.cmp(&b.0))
}

/// Greedy per-category non-maximum suppression.
///
/// A detection is dropped when a kept detection of the same category overlaps
/// it with IoU strictly above `iou_thresh`. Degenerate detections are dropped.
pub fn nms(dets: &[ScoredDetection], iou_thresh: f64) -> Vec<ScoredDetection> {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].is_well_formed())
        .collect();
    order.sort_by(|&a, &b| detection_order((a, &dets[a]), (b, &dets[b])));

    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept.iter().any(|&k| {
            dets[k].category_key == dets[i].category_key
                && iou(&dets[k].bbox, &dets[i].bbox) > iou_thresh
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// Greedy suppression over indices with a precomputed pairwise IoU matrix.
/// `order` must already be sorted by descending priority.
pub(crate) fn nms_indices(order: &[usize], iou_of: impl Fn(usize, usize) -> f64, thresh: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for &i in order {
        if kept.iter().all(|&k| iou_of(k, i) <= thresh) {
            kept.push(i);
        }
    }
    kept
}

struct Cluster {
    category: String,
    members: Vec<(BoxXYXY, f64)>,
    fused: BoxXYXY,
}

impl Cluster {
    fn refuse(&mut self) {
        let total: f64 = self.members.iter().map(|(_, s)| s).sum();
        let n = self.members.len() as f64;
        let mut acc = [0.0; 4];
        for (b, s) in &self.members {
            let w = if total > 0.0 { s / total } else { 1.0 / n };
            for (a, v) in acc.iter_mut().zip(b.to_array()) {
                *a += w * v;
            }
        }
        self.fused = BoxXYXY::from(acc);
    }

    fn mean_score(&self) -> f64 {
        self.members.iter().map(|(_, s)| s).sum::<f64>() / self.members.len() as f64
    }
}

/// Weighted boxes fusion across the outputs of several models.
///
/// Boxes are visited in descending score order and joined to the
/// best-overlapping same-category cluster whose fused box has IoU at least
/// `iou_thresh`. Each cluster emits the score-weighted mean box with the mean
/// member score scaled by `min(1, members / models)`.
pub fn wbf(det_lists: &[Vec<ScoredDetection>], iou_thresh: f64) -> Result<Vec<ScoredDetection>> {
    if det_lists.is_empty() {
        return Err(Error::Config("wbf needs at least one detection list".into()));
    }
    if !(iou_thresh > 0.0 && iou_thresh <= 1.0) {
        return Err(Error::Config(format!("wbf iou threshold {iou_thresh} outside (0, 1]")));
    }
    let n_models = det_lists.len() as f64;

    let mut flat: Vec<&ScoredDetection> = det_lists
        .iter()
        .flatten()
        .filter(|d| d.is_well_formed())
        .collect();
    // Stable sort keeps model order, then position, among exact ties.
    flat.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.category_key.cmp(&b.category_key))
    });

    let mut clusters: Vec<Cluster> = Vec::new();
    for det in flat {
        let mut best: Option<(usize, f64)> = None;
        for (ci, c) in clusters.iter().enumerate() {
            if c.category != det.category_key {
                continue;
            }
            let o = iou(&c.fused, &det.bbox);
            if o >= iou_thresh && best.is_none_or(|(_, bo)| o > bo) {
                best = Some((ci, o));
            }
        }
        match best {
            Some((ci, _)) => {
                clusters[ci].members.push((det.bbox, det.score));
                clusters[ci].refuse();
            }
            None => clusters.push(Cluster {
                category: det.category_key.clone(),
                members: vec![(det.bbox, det.score)],
                fused: det.bbox,
            }),
        }
    }

    let mut out: Vec<(usize, ScoredDetection)> = clusters
        .into_iter()
        .map(|c| {
            let scale = (c.members.len() as f64 / n_models).min(1.0);
            ScoredDetection {
                bbox: c.fused,
                score: c.mean_score() * scale,
                category_key: c.category,
                source_tag: Some("wbf".into()),
            }
        })
        .enumerate()
        .collect();
    out.sort_by(|a, b| detection_order((a.0, &a.1), (b.0, &b.1)));
    Ok(out.into_iter().map(|(_, d)| d).collect())
}
