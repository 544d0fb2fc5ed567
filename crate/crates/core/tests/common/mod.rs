//! Independent oracles and small fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod properties;

use rand_distr::weighted::WeightedIndex;
use uniworld::detector::{propose, AnchorSpec, ClassConfidence, FeatureIntegral, ProposeOptions};
use uniworld::geometry::{iou, BoxXYXY};
use uniworld::inference::ImageDetections;
use uniworld::labelspace::{EmbeddingTable, LabelSpace};
use uniworld::rng::stream;
use uniworld::synthworld::{
    make_benchmark, make_categories, render_scene, sample_layout, Benchmark, BenchmarkSpec, DetDataset, SceneObject, WorldSpec,
};
use uniworld::training::{train_proposal_stage, TrainConfig};

/// Realized proposal recall of [`noiseless_proposal_recall`].
pub const GOLDEN_RECALL: &str = include_str!("../golden/proposal_recall.json");

/// IoU by counting the cells of a `resolution`-per-unit grid whose centers
/// fall in each box.
pub fn raster_iou(a: &BoxXYXY, b: &BoxXYXY, resolution: f64) -> f64 {
    let lo = a.x1.min(b.x1).min(a.y1).min(b.y1);
    let hi = a.x2.max(b.x2).max(a.y2).max(b.y2);
    let n = ((hi - lo) * resolution).ceil() as usize;
    let inside = |bx: &BoxXYXY, x: f64, y: f64| x > bx.x1 && x < bx.x2 && y > bx.y1 && y < bx.y2;
    let (mut inter, mut uni) = (0usize, 0usize);
    for i in 0..n {
        let x = lo + (i as f64 + 0.5) / resolution;
        for j in 0..n {
            let y = lo + (j as f64 + 0.5) / resolution;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += usize::from(ia && ib);
            uni += usize::from(ia || ib);
        }
    }
    if uni == 0 {
        0.0
    } else {
        inter as f64 / uni as f64
    }
}

/// Scalar `s_c^alpha (s_r1 s_r2)^(1-alpha)` through logarithms.
pub fn cln_oracle(s_c: f64, s_r1: f64, s_r2: f64, alpha: f64) -> f64 {
    (alpha * s_c.ln() + (1.0 - alpha) * (s_r1.ln() + s_r2.ln())).exp()
}

pub fn calibrate_oracle(p: f64, pi: f64, gamma: f64) -> f64 {
    p * (-gamma * pi.ln()).exp()
}

pub fn final_score_oracle(p: f64, eta: f64, beta: f64) -> f64 {
    (beta * p.ln() + (1.0 - beta) * eta.ln()).exp()
}

/// `sigmoid((sum_k e_k sum_l W_kl f_l + b) / tau)` with explicit loops.
pub fn classify_oracle(pooled: &[f64], w: &[Vec<f64>], bias: f64, tau: f64, e: &[f64]) -> f64 {
    let mut logit = 0.0;
    for (k, row) in w.iter().enumerate() {
        let mut z = 0.0;
        for (l, f) in pooled.iter().enumerate() {
            z += row[l] * f;
        }
        logit += e[k] * z;
    }
    1.0 / (1.0 + (-(logit + bias) / tau).exp())
}

/// Relative error with an absolute floor for values near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Box IoU written out from intersection lengths.
fn plain_iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Brute-force AP of one category at one IoU threshold: detections are
/// ranked by repeatedly taking the highest remaining score (earliest image,
/// then earliest position, on ties); interpolated precision at each recall
/// level is the maximum precision over every rank reaching that level.
fn brute_ap(dets: &[ImageDetections], truth: &[Vec<SceneObject>], cat: &str, thr: f64) -> Option<f64> {
    let n_truth = truth.iter().flatten().filter(|o| o.category_key == cat).count();
    if n_truth == 0 {
        return None;
    }
    let mut pool: Vec<(usize, usize)> = Vec::new();
    for (i, img) in dets.iter().enumerate() {
        for (j, d) in img.detections.iter().enumerate() {
            if d.category_key == cat {
                pool.push((i, j));
            }
        }
    }
    let mut taken = vec![false; pool.len()];
    let mut used: Vec<Vec<bool>> = truth.iter().map(|t| vec![false; t.len()]).collect();
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::new();
    for rank in 0..pool.len() {
        let mut pick: Option<usize> = None;
        for (q, &(i, j)) in pool.iter().enumerate() {
            if taken[q] {
                continue;
            }
            let better = match pick {
                None => true,
                Some(p) => {
                    let (pi, pj) = pool[p];
                    dets[i].detections[j].score > dets[pi].detections[pj].score
                }
            };
            if better {
                pick = Some(q);
            }
        }
        let q = pick.expect("untaken detection");
        taken[q] = true;
        let (i, j) = pool[q];
        let d = &dets[i].detections[j];
        let mut best: Option<(usize, f64)> = None;
        for (t, obj) in truth[i].iter().enumerate() {
            if obj.category_key != cat || used[i][t] {
                continue;
            }
            let v = plain_iou(&d.bbox, &obj.bbox);
            if v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((t, v));
            }
        }
        if let Some((t, _)) = best {
            used[i][t] = true;
            tp += 1;
        }
        points.push((tp as f64 / n_truth as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut sum = 0.0;
    for r in 0..101 {
        let level = r as f64 / 100.0;
        let mut best = 0.0f64;
        let mut any = false;
        for &(rec, prec) in &points {
            if rec >= level {
                best = best.max(prec);
                any = true;
            }
        }
        if any {
            sum += best;
        }
    }
    Some(sum / 101.0)
}

/// Reference overall AP and AP50 over the categories with ground truth.
pub fn brute_force_ap(dets: &[ImageDetections], truth: &[Vec<SceneObject>], categories: &[String]) -> (f64, f64, Vec<(String, f64)>) {
    let mut sorted = categories.to_vec();
    sorted.sort();
    let mut per = Vec::new();
    let mut ap50s = Vec::new();
    for c in &sorted {
        let mut aps = Vec::new();
        for i in 0..10 {
            let thr = (50 + 5 * i) as f64 / 100.0;
            match brute_ap(dets, truth, c, thr) {
                Some(v) => aps.push(v),
                None => break,
            }
        }
        if aps.is_empty() {
            continue;
        }
        ap50s.push(aps[0]);
        let mut s = 0.0;
        for v in &aps {
            s += v;
        }
        per.push((c.clone(), s / aps.len() as f64));
    }
    let mean = |v: &[f64]| {
        let mut s = 0.0;
        for x in v {
            s += x;
        }
        if v.is_empty() {
            0.0
        } else {
            s / v.len() as f64
        }
    };
    let overall: Vec<f64> = per.iter().map(|(_, v)| *v).collect();
    (mean(&overall), mean(&ap50s), per)
}

/// Small world for fast end-to-end checks.
pub fn tiny_world(seed: u64) -> WorldSpec {
    WorldSpec {
        image_size: 16,
        dim: 6,
        noise_sigma: 0.2,
        n_categories: 8,
        objects_per_image: (1, 3),
        object_size: (3, 8),
        frequency_exponent: 1.0,
        seed,
    }
}

pub fn tiny_spec() -> BenchmarkSpec {
    BenchmarkSpec {
        n_sources: 2,
        overlap: 0.5,
        novel_fraction: 0.25,
        train_images_per_source: 8,
        test_images: 6,
        noisy_source: None,
        annotation_drop_rate: 0.3,
    }
}

pub fn tiny_benchmark(seed: u64) -> Benchmark {
    make_benchmark(&tiny_world(seed), &tiny_spec()).expect("tiny benchmark")
}

pub fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        proposals_per_image: 16,
        anchors_per_image: 16,
        rois_per_image: 8,
        seed,
        ..TrainConfig::default()
    }
}

/// One category on a noiseless background; a world the benchmark splitter
/// refuses, built here from its parts.
pub fn noiseless_single_category(train_images: usize, test_images: usize) -> (Vec<DetDataset>, DetDataset, EmbeddingTable) {
    let world = WorldSpec {
        noise_sigma: 0.0,
        n_categories: 1,
        seed: 11,
        ..WorldSpec::default()
    };
    let (cats, table) = make_categories(&world).unwrap();
    let keys = vec![cats[0].key.clone()];
    let weights = WeightedIndex::new([1.0]).unwrap();
    let space = LabelSpace::new(keys.clone()).unwrap();
    let make = |name: &str, n: usize| {
        let images: Vec<_> = (0..n)
            .map(|i| {
                let mut rng = stream(world.seed, name, i as u64);
                let objects = sample_layout(&world, &keys, &weights, &mut rng);
                render_scene(&world, format!("{name}_{i}"), &objects, &table, &mut rng).unwrap()
            })
            .collect();
        let visible = images.iter().map(|i| i.full_truth.clone()).collect();
        DetDataset {
            name: name.into(),
            label_space: space.clone(),
            images,
            visible,
        }
    };
    (vec![make("train", train_images)], make("test", test_images), table)
}

/// Proposal recall@10 at IoU 0.5 on held-out noiseless single-category
/// images after 30 epochs on 200 images.
pub fn noiseless_proposal_recall() -> f64 {
    let (train, test, _) = noiseless_single_category(200, 50);
    let cfg = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    let anchors = AnchorSpec::for_size(test.images[0].size);
    let (params, _) = train_proposal_stage(&train, &anchors, &cfg).unwrap();
    let grid = anchors.generate();
    let opts = ProposeOptions {
        top_k: 10,
        ..ProposeOptions::default()
    };
    let (mut hit, mut total) = (0usize, 0usize);
    for img in &test.images {
        let props = propose(&FeatureIntegral::new(img), &params, &grid, &opts, ClassConfidence::Agnostic);
        for obj in &img.full_truth {
            total += 1;
            hit += usize::from(props.iter().any(|p| iou(&p.bbox, &obj.bbox) >= 0.5));
        }
    }
    hit as f64 / total as f64
}
