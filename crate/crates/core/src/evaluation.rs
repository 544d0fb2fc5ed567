//! COCO-style box AP over an IoU sweep, grouped by training frequency and
//! by base / novel membership, plus class-agnostic average recall.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, ScoredDetection};
use crate::inference::ImageDetections;
use crate::labelspace::LabelSpace;
use crate::synthworld::{DetDataset, SceneObject};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

pub const AR_LIMITS: [usize; 3] = [1, 10, 100];
const RECALL_POINTS: usize = 101;

/// Training-count cut-offs: rare `<= rare_max`, common `<= common_max`,
/// frequent above.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupThresholds {
    pub rare_max: usize,
    pub common_max: usize,
}

impl Default for GroupThresholds {
    fn default() -> Self {
        GroupThresholds {
            rare_max: 5,
            common_max: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyGroup {
    Rare,
    Common,
    Frequent,
}

/// Group membership of every test category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGroups {
    pub frequency: BTreeMap<String, FrequencyGroup>,
    pub novel: BTreeSet<String>,
    pub thresholds: GroupThresholds,
}

impl EvalGroups {
    /// Categories never annotated in training count zero and are rare.
    pub fn from_train_counts(
        test_space: &LabelSpace,
        train_counts: &BTreeMap<String, usize>,
        novel: &LabelSpace,
        thresholds: GroupThresholds,
    ) -> Self {
        let frequency = test_space
            .iter()
            .map(|k| {
                let c = train_counts.get(k).copied().unwrap_or(0);
                let g = if c <= thresholds.rare_max {
                    FrequencyGroup::Rare
                } else if c <= thresholds.common_max {
                    FrequencyGroup::Common
                } else {
                    FrequencyGroup::Frequent
                };
                (k.to_string(), g)
            })
            .collect();
        EvalGroups {
            frequency,
            novel: novel.iter().map(str::to_string).collect(),
            thresholds,
        }
    }
}

/// Number of evaluated categories (with test instances) per group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroupCounts {
    pub evaluated: usize,
    pub rare: usize,
    pub common: usize,
    pub frequent: usize,
    pub base: usize,
    pub novel: usize,
}

/// Metrics of one detection set. Group metrics are `None` when the group
/// has no evaluated category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap_overall: f64,
    pub ap50_overall: f64,
    pub ap_per_category: BTreeMap<String, f64>,
    pub ap_rare: Option<f64>,
    pub ap_common: Option<f64>,
    pub ap_frequent: Option<f64>,
    pub ap_base: Option<f64>,
    pub ap_novel: Option<f64>,
    pub ar_at: BTreeMap<usize, f64>,
    pub counts: GroupCounts,
    pub thresholds: GroupThresholds,
}

impl EvalResult {
    /// Flat `(column, value)` pairs for a metrics row; missing groups are
    /// left blank.
    pub fn csv_fields(&self) -> Vec<(String, String)> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = vec![
            ("ap".to_string(), format!("{:.6}", self.ap_overall)),
            ("ap50".to_string(), format!("{:.6}", self.ap50_overall)),
            ("ap_base".to_string(), opt(self.ap_base)),
            ("ap_novel".to_string(), opt(self.ap_novel)),
            ("ap_rare".to_string(), opt(self.ap_rare)),
            ("ap_common".to_string(), opt(self.ap_common)),
            ("ap_frequent".to_string(), opt(self.ap_frequent)),
        ];
        for (k, v) in &self.ar_at {
            out.push((format!("ar{k}"), format!("{v:.6}")));
        }
        out
    }
}

/// Greedy matching in the given (descending score) order: a detection is a
/// true positive when an unmatched same-category truth box overlaps it with
/// IoU at least `iou_thresh`; it takes the best such box.
pub fn match_for_eval(dets: &[ScoredDetection], truth: &[SceneObject], iou_thresh: f64) -> Vec<bool> {
    let mut used = vec![false; truth.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (t, obj) in truth.iter().enumerate() {
                if used[t] || obj.category_key != d.category_key {
                    continue;
                }
                let v = iou(&d.bbox, &obj.bbox);
                if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((t, v));
                }
            }
            if let Some((t, _)) = best {
                used[t] = true;
            }
            best.is_some()
        })
        .collect()
}

/// 101-point interpolated average precision of a ranked list of
/// true/false-positive flags. `None` when there is no ground truth.
pub fn average_precision(flags: &[bool], n_truth: usize) -> Option<f64> {
    if n_truth == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        recall.push(tp as f64 / n_truth as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        while idx < recall.len() && recall[idx] < level {
            idx += 1;
        }
        if idx < recall.len() {
            sum += precision[idx];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Per-category AP at each IoU threshold, keyed by category.
fn per_category_ap(
    detections: &[ImageDetections],
    truth: &[Vec<SceneObject>],
    categories: &[String],
    thresholds: &[f64],
) -> BTreeMap<String, Vec<f64>> {
    categories
        .par_iter()
        .filter_map(|c| {
            let gts: Vec<Vec<SceneObject>> = truth
                .iter()
                .map(|t| t.iter().filter(|o| &o.category_key == c).cloned().collect())
                .collect();
            let n_truth: usize = gts.iter().map(Vec::len).sum();
            if n_truth == 0 {
                return None;
            }
            let mut ranked: Vec<(usize, &ScoredDetection)> = detections
                .iter()
                .enumerate()
                .flat_map(|(i, img)| img.detections.iter().filter(|d| &d.category_key == c).map(move |d| (i, d)))
                .collect();
            ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
            let aps = thresholds
                .iter()
                .map(|&thr| {
                    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
                    let flags: Vec<bool> = ranked
                        .iter()
                        .map(|(i, d)| {
                            let mut best: Option<(usize, f64)> = None;
                            for (t, obj) in gts[*i].iter().enumerate() {
                                if used[*i][t] {
                                    continue;
                                }
                                let v = iou(&d.bbox, &obj.bbox);
                                if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                                    best = Some((t, v));
                                }
                            }
                            if let Some((t, _)) = best {
                                used[*i][t] = true;
                            }
                            best.is_some()
                        })
                        .collect();
                    average_precision(&flags, n_truth).expect("n_truth > 0")
                })
                .collect();
            Some((c.clone(), aps))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Class-agnostic recall of the top `k` detections, averaged over images
/// with ground truth and over the IoU sweep.
pub fn average_recall(detections: &[ImageDetections], truth: &[Vec<SceneObject>], k: usize) -> f64 {
    let thresholds = iou_thresholds();
    let mut total = 0.0;
    let mut n = 0usize;
    for (img, gt) in detections.iter().zip(truth) {
        if gt.is_empty() {
            continue;
        }
        let mut dets: Vec<&ScoredDetection> = img.detections.iter().collect();
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        dets.truncate(k);
        for &thr in &thresholds {
            let mut used = vec![false; gt.len()];
            for d in &dets {
                let mut best: Option<(usize, f64)> = None;
                for (t, obj) in gt.iter().enumerate() {
                    let v = iou(&d.bbox, &obj.bbox);
                    if !used[t] && v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((t, v));
                    }
                }
                if let Some((t, _)) = best {
                    used[t] = true;
                }
            }
            total += used.iter().filter(|u| **u).count() as f64 / gt.len() as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Evaluate detections against the full test annotations.
pub fn evaluate(detections: &[ImageDetections], test: &DetDataset, groups: &EvalGroups) -> Result<EvalResult> {
    if detections.len() != test.len() {
        return Err(Error::Dimension {
            expected: test.len(),
            actual: detections.len(),
        });
    }
    for (img, dets) in test.images.iter().zip(detections) {
        if img.image_id != dets.image_id {
            return Err(Error::Format(format!(
                "detections for `{}` given for image `{}`",
                dets.image_id, img.image_id
            )));
        }
        for d in &dets.detections {
            if !test.label_space.contains(&d.category_key) {
                return Err(Error::UnknownCategory(d.category_key.clone()));
            }
        }
    }
    let categories: Vec<String> = test.label_space.keys().to_vec();
    let per = per_category_ap(detections, &test.visible, &categories, &iou_thresholds());
    let ap_per_category: BTreeMap<String, f64> = per
        .iter()
        .map(|(k, v)| (k.clone(), v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let group_mean = |pred: &dyn Fn(&str) -> bool| {
        mean(ap_per_category.iter().filter(|(k, _)| pred(k)).map(|(_, v)| *v))
    };
    let in_freq = |g: FrequencyGroup| move |k: &str| groups.frequency.get(k) == Some(&g);
    let count = |pred: &dyn Fn(&str) -> bool| ap_per_category.keys().filter(|k| pred(k)).count();
    let is_novel = |k: &str| groups.novel.contains(k);
    let is_base = |k: &str| !groups.novel.contains(k);
    let counts = GroupCounts {
        evaluated: ap_per_category.len(),
        rare: count(&in_freq(FrequencyGroup::Rare)),
        common: count(&in_freq(FrequencyGroup::Common)),
        frequent: count(&in_freq(FrequencyGroup::Frequent)),
        base: count(&is_base),
        novel: count(&is_novel),
    };
    Ok(EvalResult {
        ap_overall: mean(ap_per_category.values().copied()).unwrap_or(0.0),
        ap50_overall: mean(per.values().map(|v| v[0])).unwrap_or(0.0),
        ap_rare: group_mean(&in_freq(FrequencyGroup::Rare)),
        ap_common: group_mean(&in_freq(FrequencyGroup::Common)),
        ap_frequent: group_mean(&in_freq(FrequencyGroup::Frequent)),
        ap_base: group_mean(&is_base),
        ap_novel: group_mean(&is_novel),
        ar_at: AR_LIMITS
            .iter()
            .map(|&k| (k, average_recall(detections, &test.visible, k)))
            .collect(),
        ap_per_category,
        counts,
        thresholds: groups.thresholds,
    })
}

/// Truth boxes as detections with score 1, for perfect-detector checks.
pub fn truth_as_detections(test: &DetDataset) -> Vec<ImageDetections> {
    test.images
        .iter()
        .zip(&test.visible)
        .map(|(img, objs)| ImageDetections {
            image_id: img.image_id.clone(),
            detections: objs
                .iter()
                .map(|o| ScoredDetection::new(o.bbox, 1.0, o.category_key.clone()))
                .collect(),
        })
        .collect()
}
