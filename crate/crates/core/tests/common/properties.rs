//! Every listed module invariant as a runnable property check. The module
//! test files call these one by one; the acceptance run walks [`all`].

use std::collections::BTreeSet;
use std::sync::OnceLock;

use ndarray::Array2;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed, TestCaseError, TestRunner};

use uniworld::detector::{
    classify_region, cln_score, propose, AnchorSpec, ClassConfidence, FeatureIntegral, ProposalNetParams, ProposeOptions,
    RoIClassifierParams,
};
use uniworld::evaluation::{evaluate, EvalGroups, GroupThresholds};
use uniworld::experiment::{benchmark_groups, Arm, ExperimentConfig};
use uniworld::geometry::{iou, nms, wbf, BoxXYXY, ScoredDetection};
use uniworld::inference::{calibrate_value, final_score, run_open_world, to_jsonl, ImageDetections, InferenceConfig};
use uniworld::labelspace::{embedding_matrix, novel_split, union_spaces, EmbeddingTable, LabelSpace};
use uniworld::persist::checkpoint_json;
use uniworld::rng::stream;
use uniworld::runner::{run_experiment, RunState, RunStatus, STATUS_FILE};
use uniworld::synthworld::{make_benchmark, BenchmarkSpec, DetDataset, SceneObject, SyntheticImage, WorldSpec};
use uniworld::training::{
    build_structure, roi_loss_and_grad, sample_negatives, train_proposal_stage, RoiSample, Structure, TrainConfig,
    TrainedSystem,
};

use super::{raster_iou, rel_err, tiny_benchmark, tiny_spec, tiny_train, tiny_world};

/// Default number of random cases per property.
pub const CASES: u32 = 256;

pub struct Property {
    pub module: &'static str,
    pub statement: &'static str,
    pub cases: u32,
    pub check: fn() -> Result<(), String>,
}

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        rng_seed: RngSeed::Fixed(0x0b5e_55ed),
        max_shrink_iters: 2000,
        ..Config::default()
    };
    TestRunner::new(config).run(&strategy, test).map_err(|e| e.to_string())
}

fn real_box() -> impl Strategy<Value = BoxXYXY> {
    (0.0f64..40.0, 0.0f64..40.0, 0.1f64..25.0, 0.1f64..25.0)
        .prop_map(|(x, y, w, h)| BoxXYXY::new(x, y, x + w, y + h).expect("positive size"))
}

fn int_box(range: i32) -> impl Strategy<Value = BoxXYXY> {
    (0..range, 0..range).prop_flat_map(move |(x, y)| {
        (Just((x, y)), 1..=range - x, 1..=range - y)
    })
    .prop_map(|((x, y), w, h)| BoxXYXY::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).expect("positive size"))
}

fn detection() -> impl Strategy<Value = ScoredDetection> {
    (0.0f64..16.0, 0.0f64..16.0, 1.0f64..10.0, 1.0f64..10.0, 0.0f64..1.0, 0usize..3).prop_map(|(x, y, w, h, s, c)| {
        ScoredDetection::new(BoxXYXY::new(x, y, x + w, y + h).expect("positive size"), s, ["a", "b", "c"][c])
    })
}

// ---- core_geometry ----

pub fn iou_symmetric() -> Result<(), String> {
    run(10_000, (real_box(), real_box()), |(a, b)| {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        prop_assert!((0.0..=1.0).contains(&ab));
        Ok(())
    })
}

/// Integer-coordinate boxes against a cell-counting oracle at 4 cells per
/// unit; the tolerance is `2 / resolution` of the underlying grid.
pub fn iou_matches_raster() -> Result<(), String> {
    const RES: f64 = 4.0;
    run(10_000, (int_box(24), int_box(24)), |(a, b)| {
        let exact = iou(&a, &b);
        let counted = raster_iou(&a, &b, RES);
        prop_assert!((exact - counted).abs() <= 2e-3, "iou {} raster {}", exact, counted);
        Ok(())
    })
}

pub fn nms_output_is_subset() -> Result<(), String> {
    run(CASES, (proptest::collection::vec(detection(), 0..24), 0.0f64..1.0), |(dets, t)| {
        let kept = nms(&dets, t);
        prop_assert!(kept.len() <= dets.len());
        for k in &kept {
            prop_assert!(dets.contains(k));
        }
        Ok(())
    })
}

/// Three boxes where greedy NMS drops at 0.7 a box it keeps at 0.5.
pub fn nms_threshold_counterexample() -> (Vec<ScoredDetection>, f64, f64) {
    let b = |x: f64, s: f64| ScoredDetection::new(BoxXYXY::new(x, 0.0, x + 10.0, 10.0).expect("box"), s, "a");
    (vec![b(0.0, 0.9), b(2.5, 0.8), b(3.95, 0.7)], 0.5, 0.7)
}

fn survivors_stay(dets: &[ScoredDetection], lo: f64, hi: f64) -> Result<(), TestCaseError> {
    let at_hi = nms(dets, hi);
    for d in nms(dets, lo) {
        prop_assert!(at_hi.contains(&d), "box {:?} kept at {} but dropped at {}", d.bbox, lo, hi);
    }
    Ok(())
}

/// Raising the threshold never removes a survivor. Random crowded scenes
/// first, then the known chain configuration.
pub fn nms_threshold_monotone() -> Result<(), String> {
    let crowded = (0.0f64..6.0, 0.0f64..2.0, 0.0f64..1.0).prop_map(|(x, y, s)| {
        ScoredDetection::new(BoxXYXY::new(x, y, x + 10.0, y + 10.0).expect("box"), s, "a")
    });
    run(CASES, (proptest::collection::vec(crowded, 1..10), 0.0f64..1.0, 0.0f64..1.0), |(dets, a, b)| {
        survivors_stay(&dets, a.min(b), a.max(b))
    })?;
    let (dets, lo, hi) = nms_threshold_counterexample();
    survivors_stay(&dets, lo, hi).map_err(|e| format!("fixed chain case: {e}"))
}

/// Disjoint clusters of near-identical boxes; at a threshold just below 1
/// every fused coordinate lies within its members' range.
pub fn wbf_weighted_mean_containment() -> Result<(), String> {
    let member = (0.0f64..1e-7, 0.0f64..1e-7, 0.0f64..1e-7, 0.0f64..1e-7, 0.01f64..1.0);
    let cluster = (1.0f64..8.0, 1.0f64..8.0, proptest::collection::vec(member, 1..4));
    run(CASES, proptest::collection::vec(cluster, 1..5), |clusters| {
        let mut dets = Vec::new();
        let mut members: Vec<Vec<BoxXYXY>> = Vec::new();
        for (ci, (w, h, ms)) in clusters.iter().enumerate() {
            let x0 = 20.0 * ci as f64;
            let mut group = Vec::new();
            for &(a, b, c, d, s) in ms {
                let bx = BoxXYXY::new(x0 + a, b, x0 + w + c, h + d).expect("box");
                group.push(bx);
                dets.push(ScoredDetection::new(bx, s, "a"));
            }
            members.push(group);
        }
        let fused = wbf(&[dets], 1.0 - 1e-6).map_err(|e| TestCaseError::fail(e.to_string()))?;
        for f in &fused {
            let group = members
                .iter()
                .find(|g| iou(&g[0], &f.bbox) > 0.5)
                .ok_or_else(|| TestCaseError::fail("fused box matches no cluster"))?;
            let c = f.bbox.to_array();
            for k in 0..4 {
                let lo = group.iter().map(|b| b.to_array()[k]).fold(f64::INFINITY, f64::min);
                let hi = group.iter().map(|b| b.to_array()[k]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(c[k] >= lo - 1e-12 && c[k] <= hi + 1e-12);
            }
        }
        Ok(())
    })
}

// ---- labelspace ----

fn space() -> impl Strategy<Value = LabelSpace> {
    proptest::collection::btree_set(0usize..16, 0..10)
        .prop_map(|s| s.into_iter().map(|i| format!("k{i}")).collect::<Vec<_>>())
        .prop_shuffle()
        .prop_map(|v| LabelSpace::new(v).expect("unique keys"))
}

pub fn novel_split_partitions() -> Result<(), String> {
    run(CASES, (space(), proptest::collection::vec(space(), 0..4)), |(test, train)| {
        let (base, novel) = novel_split(&test, &train);
        let seen: BTreeSet<&str> = train.iter().flat_map(|s| s.iter()).collect();
        prop_assert_eq!(base.len() + novel.len(), test.len());
        for k in test.iter() {
            prop_assert!(base.contains(k) != novel.contains(k));
            prop_assert_eq!(base.contains(k), seen.contains(k));
        }
        Ok(())
    })
}

pub fn union_associative_idempotent() -> Result<(), String> {
    run(CASES, (space(), space(), space()), |(a, b, c)| {
        let left = union_spaces(&[union_spaces(&[a.clone(), b.clone()]), c.clone()]);
        let right = union_spaces(&[a.clone(), union_spaces(&[b.clone(), c.clone()])]);
        prop_assert_eq!(&left, &right);
        prop_assert_eq!(union_spaces(&[a.clone(), a.clone()]), a.clone());
        prop_assert_eq!(union_spaces(&[left.clone(), left.clone()]), left);
        Ok(())
    })
}

pub fn embedding_rows_unit_norm() -> Result<(), String> {
    let vecs = proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 1..8), 1..10);
    run(CASES, vecs, |raw| {
        let dim = raw[0].len();
        let mut table = EmbeddingTable::new(dim);
        let mut keys = Vec::new();
        for (i, v) in raw.iter().enumerate() {
            let mut v: Vec<f64> = v.iter().cycle().take(dim).copied().collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
            table.insert(format!("k{i}"), v).map_err(|e| TestCaseError::fail(e.to_string()))?;
            keys.push(format!("k{i}"));
        }
        let m = embedding_matrix(&LabelSpace::new(keys).expect("unique"), &table).map_err(|e| TestCaseError::fail(e.to_string()))?;
        for row in m.rows() {
            prop_assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
        }
        Ok(())
    })
}

// ---- synthworld ----

fn random_benchmark_spec() -> impl Strategy<Value = (WorldSpec, BenchmarkSpec)> {
    (any::<u64>(), 4usize..24, 1usize..4, 0.0f64..1.0, 0.0f64..0.6, proptest::option::of(0usize..3)).prop_map(
        |(seed, n_categories, n_sources, overlap, novel_fraction, noisy)| {
            let world = WorldSpec {
                image_size: 10,
                dim: 3,
                n_categories,
                object_size: (2, 6),
                objects_per_image: (0, 4),
                seed,
                ..WorldSpec::default()
            };
            let spec = BenchmarkSpec {
                n_sources,
                overlap,
                novel_fraction,
                train_images_per_source: 3,
                test_images: 2,
                noisy_source: noisy.filter(|&s| s < n_sources),
                annotation_drop_rate: 0.3,
            };
            (world, spec)
        },
    )
}

pub fn held_out_is_novel() -> Result<(), String> {
    run(CASES, random_benchmark_spec(), |(world, spec)| {
        let Ok(b) = make_benchmark(&world, &spec) else {
            return Ok(());
        };
        let spaces: Vec<LabelSpace> = b.train.iter().map(|d| d.label_space.clone()).collect();
        let (_, novel) = novel_split(&b.test_space, &spaces);
        let novel: BTreeSet<&str> = novel.iter().collect();
        prop_assert_eq!(novel, b.held_out.iter().collect::<BTreeSet<&str>>());
        Ok(())
    })
}

pub fn visible_subset_of_truth() -> Result<(), String> {
    run(CASES, random_benchmark_spec(), |(world, spec)| {
        let Ok(b) = make_benchmark(&world, &spec) else {
            return Ok(());
        };
        for d in b.train.iter().chain(std::iter::once(&b.test)) {
            for (img, vis) in d.images.iter().zip(&d.visible) {
                for o in vis {
                    prop_assert!(img.full_truth.contains(o));
                    prop_assert!(d.label_space.contains(&o.category_key));
                }
            }
        }
        Ok(())
    })
}

pub fn generation_is_pure() -> Result<(), String> {
    run(CASES, random_benchmark_spec(), |(world, spec)| {
        let (Ok(a), Ok(b)) = (make_benchmark(&world, &spec), make_benchmark(&world, &spec)) else {
            return Ok(());
        };
        prop_assert_eq!(&a.train, &b.train);
        prop_assert_eq!(&a.test, &b.test);
        prop_assert_eq!(&a.table, &b.table);
        prop_assert_eq!(&a.held_out, &b.held_out);
        for (x, y) in a.test.images.iter().zip(&b.test.images) {
            prop_assert!(x.features.iter().zip(&y.features).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        Ok(())
    })
}

// ---- detector_model ----

pub fn cln_monotone() -> Result<(), String> {
    let p = 0.0f64..=1.0;
    run(CASES, (p.clone(), p.clone(), p, 0.0f64..0.5, 0.01f64..0.99), |(c, r1, r2, d, alpha)| {
        let base = cln_score(c, r1, r2, alpha);
        prop_assert!(cln_score((c + d).min(1.0), r1, r2, alpha) >= base);
        prop_assert!(cln_score(c, (r1 + d).min(1.0), r2, alpha) >= base);
        prop_assert!(cln_score(c, r1, (r2 + d).min(1.0), alpha) >= base);
        Ok(())
    })
}

pub fn cln_localization_symmetric() -> Result<(), String> {
    let p = 0.0f64..=1.0;
    run(CASES, (p.clone(), p.clone(), p, 0.0f64..=1.0), |(c, r1, r2, alpha)| {
        prop_assert_eq!(cln_score(c, r1, r2, alpha).to_bits(), cln_score(c, r2, r1, alpha).to_bits());
        Ok(())
    })
}

pub fn cln_homogeneous() -> Result<(), String> {
    run(CASES, (0.001f64..1.0, 0.001f64..1.0, 0.01f64..4.0, 0.0f64..=1.0), |(c, x, k, alpha)| {
        let scaled = cln_score(k * c, k * x, 1.0, alpha);
        let expected = k * cln_score(c, x, 1.0, alpha);
        prop_assert!(rel_err(scaled, expected) < 1e-12, "{} vs {}", scaled, expected);
        Ok(())
    })
}

fn unit_rows(raw: &[Vec<f64>], dim: usize) -> Array2<f64> {
    let mut m = Array2::zeros((raw.len(), dim));
    for (i, r) in raw.iter().enumerate() {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        for j in 0..dim {
            m[[i, j]] = r[j] / n;
        }
    }
    m
}

pub fn classify_permutation_equivariant() -> Result<(), String> {
    let inst = (2usize..6, 2usize..6, 1usize..8).prop_flat_map(|(e, d, l)| {
        (
            proptest::collection::vec(-1.0f64..1.0, e * d),
            proptest::collection::vec(-1.0f64..1.0, d),
            proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, e), l),
            Just((0..l).collect::<Vec<usize>>()).prop_shuffle(),
            0.05f64..1.0,
            Just((e, d)),
        )
    });
    run(CASES, inst, |(w, f, rows, perm, tau, (e, d))| {
        let params = RoIClassifierParams::new(Array2::from_shape_vec((e, d), w).expect("shape"), tau).expect("params");
        let emb = unit_rows(&rows, e);
        let permuted = unit_rows(&perm.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>(), e);
        let p = classify_region(&f, &params, &emb);
        let q = classify_region(&f, &params, &permuted);
        for (i, &src) in perm.iter().enumerate() {
            prop_assert!(rel_err(q[i], p[src]) < 1e-14);
        }
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).expect("non-empty");
        prop_assert!(rel_err(p[perm[argmax(&q)]], p[argmax(&p)]) < 1e-14);
        Ok(())
    })
}

fn random_params() -> impl Strategy<Value = ProposalNetParams> {
    let head = || proptest::collection::vec(-2.0f64..2.0, ProposalNetParams::zeros().objectness.len());
    (head(), head(), head(), proptest::collection::vec(head(), 4)).prop_map(|(o, l, b, d)| ProposalNetParams {
        objectness: o,
        locquality: l,
        binarycls: b,
        box_delta: d,
    })
}

pub fn propose_bounded_and_valid() -> Result<(), String> {
    let inst = (8usize..17, 1usize..4).prop_flat_map(|(size, dim)| {
        (
            Just((size, dim)),
            proptest::collection::vec(-1.0f32..1.0, size * size * dim),
            random_params(),
            1usize..40,
            1usize..5,
            0.0f64..=1.0,
        )
    });
    run(CASES, inst, |((size, dim), features, params, top_k, factor, alpha)| {
        let img = SyntheticImage {
            image_id: "p".into(),
            size,
            dim,
            features,
            full_truth: vec![],
        };
        let opts = ProposeOptions {
            top_k,
            pre_nms_factor: factor,
            alpha,
            ..ProposeOptions::default()
        };
        let anchors = AnchorSpec::for_size(size).generate();
        let props = propose(&FeatureIntegral::new(&img), &params, &anchors, &opts, ClassConfidence::Agnostic);
        prop_assert!(props.len() <= top_k);
        for p in &props {
            prop_assert!(p.bbox.is_valid());
            let [x1, y1, x2, y2] = p.bbox.to_array();
            prop_assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= size as f64 && y2 <= size as f64);
            prop_assert!((0.0..=1.0).contains(&p.eta));
        }
        Ok(())
    })
}

// ---- training ----

fn tiny_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        ..tiny_train(seed)
    }
}

pub fn decoupling_contract() -> Result<(), String> {
    run(CASES, any::<u64>(), |seed| {
        let b = tiny_benchmark(seed % 64);
        let cfg = tiny_cfg(seed);
        let anchors = AnchorSpec::for_size(b.train[0].images[0].size);
        let (proposal, _) = train_proposal_stage(&b.train, &anchors, &cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let before = proposal.clone();
        let run = build_structure(&b.train, &cfg, &b.table).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(&proposal, &before);
        for s in &run.systems {
            prop_assert_eq!(&s.proposal, &before, "classification stage changed the proposal network");
        }
        Ok(())
    })
}

pub fn partitioned_gradient_isolation() -> Result<(), String> {
    let inst = (2usize..12, 2usize..5, 2usize..5, any::<u64>());
    run(CASES, inst, |(n_cats, e, d, seed)| {
        let mut rng = stream(seed, "isolation", 0);
        let pool: Vec<usize> = (0..n_cats).filter(|_| rng.random_bool(0.5)).collect();
        if pool.is_empty() {
            return Ok(());
        }
        let emb = Array2::from_shape_fn((n_cats, e), |_| rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_fn((e, d), |_| rng.random_range(-1.0..1.0));
        let params = RoIClassifierParams::new(w, 0.5).expect("params").with_bias(rng.random_range(-1.0..1.0)).expect("bias");
        let samples: Vec<RoiSample> = (0..rng.random_range(1..6))
            .map(|_| {
                let positive = rng.random_bool(0.5).then(|| pool[rng.random_range(0..pool.len())]);
                let negatives = sample_negatives(&pool, positive, rng.random_range(0..4), &mut rng);
                RoiSample {
                    pooled: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    positive,
                    negatives,
                }
            })
            .collect();
        let g = roi_loss_and_grad(&params, &emb, &samples);
        for j in (0..n_cats).filter(|j| !pool.contains(j)) {
            prop_assert!(g.embedding_grad.row(j).iter().all(|&v| v == 0.0), "row {} outside the source got gradient", j);
        }
        Ok(())
    })
}

pub fn saturated_loss_vanishes() -> Result<(), String> {
    let inst = (2usize..6, proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 6), 1..6), any::<u64>());
    run(CASES, inst, |(e, raw, seed)| {
        let mut rng = stream(seed, "saturate", 0);
        let pos: Vec<f64> = (0..e).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pos_n = pos.iter().map(|x| x * x).sum::<f64>().sqrt();
        if pos_n < 1e-3 {
            return Ok(());
        }
        let pos: Vec<f64> = pos.iter().map(|x| x / pos_n).collect();
        let mut rows = vec![pos.clone()];
        for r in &raw {
            let v: Vec<f64> = r[..e].to_vec();
            let dot: f64 = v.iter().zip(&pos).map(|(a, b)| a * b).sum();
            // Push every negative at least 0.1 against the positive.
            let v: Vec<f64> = v.iter().zip(&pos).map(|(a, b)| a - (dot + 0.1).max(0.0) * b).collect();
            rows.push(v);
        }
        let emb = Array2::from_shape_fn((rows.len(), e), |(i, j)| rows[i][j]);
        let params = RoIClassifierParams::new(Array2::eye(e) * 10.0, 0.01).expect("params");
        let sample = RoiSample {
            pooled: pos,
            positive: Some(0),
            negatives: (1..rows.len()).collect(),
        };
        let g = roi_loss_and_grad(&params, &emb, &[sample]);
        prop_assert!(g.loss < 1e-12, "loss {}", g.loss);
        Ok(())
    })
}

pub fn training_is_deterministic() -> Result<(), String> {
    run(CASES, (any::<u64>(), any::<bool>()), |(seed, decouple)| {
        let b = tiny_benchmark(seed % 64);
        let cfg = TrainConfig {
            decouple,
            ..tiny_cfg(seed)
        };
        let a = build_structure(&b.train, &cfg, &b.table).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let c = build_structure(&b.train, &cfg, &b.table).map_err(|e| TestCaseError::fail(e.to_string()))?;
        for (x, y) in a.systems.iter().zip(&c.systems) {
            prop_assert_eq!(checkpoint_json(x).expect("json"), checkpoint_json(y).expect("json"));
        }
        Ok(())
    })
}

/// Central differences against the analytic gradient of the projection,
/// the bias and the embedding rows.
pub fn gradient_matches_finite_differences(cases: u32) -> Result<(), String> {
    run(cases, (2usize..5, 2usize..5, 2usize..6, any::<u64>()), |(e, d, l, seed)| {
        let mut rng = stream(seed, "fd", 0);
        let tau = rng.random_range(0.2..1.0);
        let w = Array2::from_shape_fn((e, d), |_| rng.random_range(-1.0..1.0));
        let bias = rng.random_range(-0.5..0.5);
        let emb = Array2::from_shape_fn((l, e), |_| rng.random_range(-1.0..1.0));
        let all: Vec<usize> = (0..l).collect();
        let samples: Vec<RoiSample> = (0..rng.random_range(1..5))
            .map(|_| {
                let positive = rng.random_bool(0.7).then(|| rng.random_range(0..l));
                let negatives = sample_negatives(&all, positive, rng.random_range(1..l), &mut rng);
                RoiSample {
                    pooled: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    positive,
                    negatives,
                }
            })
            .collect();
        let params = RoIClassifierParams::new(w.clone(), tau).expect("params").with_bias(bias).expect("bias");
        let g = roi_loss_and_grad(&params, &emb, &samples);
        let loss = |w: &Array2<f64>, b: f64, emb: &Array2<f64>| {
            let p = RoIClassifierParams::new(w.clone(), tau).expect("params").with_bias(b).expect("bias");
            roi_loss_and_grad(&p, emb, &samples).loss
        };
        let h = 1e-6;
        let close = |analytic: f64, numeric: f64| (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()).max(1e-4);
        for i in 0..e {
            for j in 0..d {
                let (mut up, mut down) = (w.clone(), w.clone());
                up[[i, j]] += h;
                down[[i, j]] -= h;
                let num = (loss(&up, bias, &emb) - loss(&down, bias, &emb)) / (2.0 * h);
                prop_assert!(close(g.grad[[i, j]], num), "dW[{},{}]: {} vs {}", i, j, g.grad[[i, j]], num);
            }
        }
        let num = (loss(&w, bias + h, &emb) - loss(&w, bias - h, &emb)) / (2.0 * h);
        prop_assert!(close(g.bias_grad, num), "db: {} vs {}", g.bias_grad, num);
        for r in 0..l {
            for c in 0..e {
                let (mut up, mut down) = (emb.clone(), emb.clone());
                up[[r, c]] += h;
                down[[r, c]] -= h;
                let num = (loss(&w, bias, &up) - loss(&w, bias, &down)) / (2.0 * h);
                prop_assert!(close(g.embedding_grad[[r, c]], num), "dE[{},{}]: {} vs {}", r, c, g.embedding_grad[[r, c]], num);
            }
        }
        Ok(())
    })
}

pub fn gradient_fd_default() -> Result<(), String> {
    gradient_matches_finite_differences(CASES)
}

// ---- inference ----

pub fn calibration_ranking_law() -> Result<(), String> {
    let p = 1e-6f64..1.0;
    let pi = 0.001f64..=1.0;
    run(CASES * 4, (p.clone(), p, pi.clone(), pi, 0.0f64..=1.0), |(pj, pk, pij, pik, gamma)| {
        if pj == pk {
            return Ok(());
        }
        let (hi, lo, pi_hi, pi_lo) = if pj > pk { (pj, pk, pij, pik) } else { (pk, pj, pik, pij) };
        let lhs = hi / lo;
        let rhs = (pi_hi / pi_lo).powf(gamma);
        if rel_err(lhs, rhs) < 1e-9 {
            return Ok(());
        }
        let flipped = calibrate_value(hi, pi_hi, gamma) < calibrate_value(lo, pi_lo, gamma);
        prop_assert_eq!(flipped, lhs < rhs);
        Ok(())
    })
}

pub fn uniform_prior_keeps_argmax() -> Result<(), String> {
    run(CASES, (proptest::collection::vec(1e-6f64..1.0, 1..20), 0.001f64..=1.0, 0.0f64..=1.0), |(ps, pi, gamma)| {
        let cal: Vec<f64> = ps.iter().map(|&p| calibrate_value(p, pi, gamma)).collect();
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a))).expect("non-empty");
        prop_assert_eq!(cal[argmax(&ps)], cal[argmax(&cal)]);
        let ratio = cal[0] / ps[0];
        for (c, p) in cal.iter().zip(&ps) {
            prop_assert!(rel_err(c / p, ratio) < 1e-12);
        }
        Ok(())
    })
}

pub fn final_score_monotone_homogeneous() -> Result<(), String> {
    let v = 0.0f64..=1.0;
    run(CASES, (v.clone(), v, 0.0f64..0.5, 0.0f64..=1.0, 0.01f64..2.0), |(p, eta, d, beta, c)| {
        let s = final_score(p, eta, beta);
        prop_assert!(final_score(p + d, eta, beta) >= s);
        prop_assert!(final_score(p, eta + d, beta) >= s);
        prop_assert!(rel_err(final_score(c * p, c * eta, beta), c * s) < 1e-12 || s == 0.0);
        Ok(())
    })
}

/// Small trained systems reused by the inference properties.
fn trained_systems() -> &'static Vec<(u64, Vec<TrainedSystem>)> {
    static CACHE: OnceLock<Vec<(u64, Vec<TrainedSystem>)>> = OnceLock::new();
    CACHE.get_or_init(|| {
        (0..4u64)
            .map(|seed| {
                let b = tiny_benchmark(seed);
                let structure = [Structure::Partitioned, Structure::Separate][seed as usize % 2];
                let cfg = TrainConfig {
                    structure,
                    decouple: seed != 2,
                    ..tiny_train(seed)
                };
                (seed, build_structure(&b.train, &cfg, &b.table).expect("train").systems)
            })
            .collect()
    })
}

fn random_inference() -> impl Strategy<Value = InferenceConfig> {
    (0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, any::<bool>(), 1usize..50).prop_map(|(alpha, beta, gamma, calibrate, max_detections)| {
        InferenceConfig {
            alpha,
            beta,
            gamma,
            calibrate,
            max_detections,
            ..InferenceConfig::default()
        }
    })
}

fn subset_space(space: &LabelSpace, mask: u64) -> LabelSpace {
    let keys: Vec<&str> = space.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, k)| k).collect();
    if keys.is_empty() {
        LabelSpace::new(space.iter().take(1)).expect("one key")
    } else {
        LabelSpace::new(keys).expect("subset")
    }
}

pub fn inference_is_deterministic() -> Result<(), String> {
    run(CASES, (0usize..4, random_inference()), |(which, cfg)| {
        let (seed, systems) = &trained_systems()[which];
        let b = tiny_benchmark(*seed);
        let go = || {
            run_open_world(systems, &b.test, &b.test_space, &b.table, &b.train, &cfg)
                .and_then(|o| to_jsonl(&o.images))
                .map_err(|e| TestCaseError::fail(e.to_string()))
        };
        prop_assert_eq!(go()?, go()?);
        Ok(())
    })
}

pub fn detections_stay_in_test_space() -> Result<(), String> {
    run(CASES, (0usize..4, random_inference(), any::<u64>()), |(which, cfg, mask)| {
        let (seed, systems) = &trained_systems()[which];
        let b = tiny_benchmark(*seed);
        let space = subset_space(&b.test_space, mask);
        let out = run_open_world(systems, &b.test, &space, &b.table, &b.train, &cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
        for d in out.images.iter().flat_map(|i| &i.detections) {
            prop_assert!(space.contains(&d.category_key));
        }
        Ok(())
    })
}

// ---- evaluation ----

/// Seeded random evaluation instance: jittered copies of the truth with some
/// category errors, plus clutter.
pub fn random_eval_instance(seed: u64, n_images: usize) -> (Vec<ImageDetections>, DetDataset, EvalGroups) {
    let mut rng = stream(seed, "eval-instance", 0);
    let cats: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
    let space = LabelSpace::new(cats.clone()).expect("keys");
    let rand_box = |rng: &mut uniworld::rng::Rng| {
        let x = rng.random_range(0..24) as f64;
        let y = rng.random_range(0..24) as f64;
        let w = rng.random_range(2..9) as f64;
        let h = rng.random_range(2..9) as f64;
        BoxXYXY::new(x, y, x + w, y + h).expect("box")
    };
    let mut images = Vec::new();
    let mut visible = Vec::new();
    let mut dets = Vec::new();
    for i in 0..n_images {
        let truth: Vec<SceneObject> = (0..rng.random_range(0..5))
            .map(|_| SceneObject {
                bbox: rand_box(&mut rng),
                category_key: cats[rng.random_range(0..cats.len())].clone(),
            })
            .collect();
        let mut d = Vec::new();
        for t in &truth {
            for _ in 0..rng.random_range(0..3) {
                let j = |rng: &mut uniworld::rng::Rng| rng.random_range(-2..=2) as f64;
                let [x1, y1, x2, y2] = t.bbox.to_array();
                let (a, b) = (x1 + j(&mut rng), y1 + j(&mut rng));
                let bx = BoxXYXY::new(a, b, (x2 + j(&mut rng)).max(a + 1.0), (y2 + j(&mut rng)).max(b + 1.0)).expect("box");
                let cat = if rng.random_bool(0.8) { t.category_key.clone() } else { cats[rng.random_range(0..cats.len())].clone() };
                // Scores on a coarse grid so ties occur.
                d.push(ScoredDetection::new(bx, rng.random_range(1..=50) as f64 / 50.0, cat));
            }
        }
        for _ in 0..rng.random_range(0..4) {
            let cat = cats[rng.random_range(0..cats.len())].clone();
            d.push(ScoredDetection::new(rand_box(&mut rng), rng.random_range(1..=50) as f64 / 50.0, cat));
        }
        let id = format!("img{i}");
        images.push(SyntheticImage {
            image_id: id.clone(),
            size: 32,
            dim: 1,
            features: vec![0.0; 32 * 32],
            full_truth: truth.clone(),
        });
        visible.push(truth);
        dets.push(ImageDetections { image_id: id, detections: d });
    }
    let test = DetDataset {
        name: "test".into(),
        label_space: space.clone(),
        images,
        visible,
    };
    let counts = cats.iter().enumerate().map(|(i, k)| (k.clone(), [0, 3, 10, 40, 100][i])).collect();
    let novel = LabelSpace::new(["c0", "c2"]).expect("keys");
    let groups = EvalGroups::from_train_counts(&space, &counts, &novel, GroupThresholds::default());
    (dets, test, groups)
}

fn eval_case() -> impl Strategy<Value = (u64, usize)> {
    (any::<u64>(), 1usize..8)
}

pub fn zero_score_false_positive_never_helps() -> Result<(), String> {
    run(CASES, (eval_case(), 0usize..5, 0usize..8), |((seed, n), cat, img)| {
        let (mut dets, test, groups) = random_eval_instance(seed, n);
        let before = evaluate(&dets, &test, &groups).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let far = BoxXYXY::new(100.0, 100.0, 101.0, 101.0).expect("box");
        let i = img % dets.len();
        dets[i].detections.push(ScoredDetection::new(far, 0.0, format!("c{cat}")));
        let after = evaluate(&dets, &test, &groups).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(after.ap_overall <= before.ap_overall);
        for (k, v) in &after.ap_per_category {
            prop_assert!(*v <= before.ap_per_category[k]);
        }
        Ok(())
    })
}

pub fn ap_is_rank_statistic() -> Result<(), String> {
    run(CASES, (eval_case(), 0usize..4, 0.1f64..5.0), |((seed, n), which, k)| {
        let (dets, test, groups) = random_eval_instance(seed, n);
        let f = |s: f64| match which {
            0 => s.powf(k),
            1 => (k * s).exp(),
            2 => (s * k).ln_1p() + 7.0,
            _ => s * s * s + k * s,
        };
        let mapped: Vec<ImageDetections> = dets
            .iter()
            .map(|img| ImageDetections {
                image_id: img.image_id.clone(),
                detections: img
                    .detections
                    .iter()
                    .map(|d| ScoredDetection { score: f(d.score), ..d.clone() })
                    .collect(),
            })
            .collect();
        let a = evaluate(&dets, &test, &groups).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let b = evaluate(&mapped, &test, &groups).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(a.ap_per_category, b.ap_per_category);
        Ok(())
    })
}

pub fn group_means_recombine() -> Result<(), String> {
    run(CASES, eval_case(), |(seed, n)| {
        let (dets, test, groups) = random_eval_instance(seed, n);
        let r = evaluate(&dets, &test, &groups).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let c = r.counts;
        let weighted = |parts: &[(Option<f64>, usize)]| {
            let n: usize = parts.iter().map(|p| p.1).sum();
            parts.iter().map(|(v, k)| v.unwrap_or(0.0) * *k as f64).sum::<f64>() / n as f64
        };
        if c.evaluated == 0 {
            return Ok(());
        }
        let by_novelty = weighted(&[(r.ap_base, c.base), (r.ap_novel, c.novel)]);
        let by_freq = weighted(&[(r.ap_rare, c.rare), (r.ap_common, c.common), (r.ap_frequent, c.frequent)]);
        prop_assert!((by_novelty - r.ap_overall).abs() < 1e-12);
        prop_assert!((by_freq - r.ap_overall).abs() < 1e-12);
        Ok(())
    })
}

pub fn recall_grows_with_k() -> Result<(), String> {
    run(CASES, eval_case(), |(seed, n)| {
        let (dets, test, groups) = random_eval_instance(seed, n);
        let r = evaluate(&dets, &test, &groups).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(r.ar_at[&1] <= r.ar_at[&10] && r.ar_at[&10] <= r.ar_at[&100]);
        Ok(())
    })
}

// ---- cli_orchestration ----

fn tiny_experiment(seed: u64, out: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        world: tiny_world(0),
        benchmark: tiny_spec(),
        train: tiny_cfg(0),
        output_dir: out.to_path_buf(),
        seeds: vec![seed],
        ..ExperimentConfig::default()
    }
}

/// A run re-executed from its own `config.json` reproduces every detection
/// file and checkpoint byte for byte.
pub fn run_config_reproduces() -> Result<(), String> {
    run(CASES, 0u64..1000, |seed| {
        let dir = tempfile::tempdir().map_err(|e| TestCaseError::fail(e.to_string()))?;
        let first = dir.path().join("first");
        let cfg = tiny_experiment(seed, &first);
        run_experiment(&cfg, &Arm::ALL, &first, false).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let text = std::fs::read_to_string(first.join("config.json")).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let echoed: ExperimentConfig = serde_json::from_str(&text).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(&echoed, &cfg);
        let second = dir.path().join("second");
        run_experiment(&echoed, &Arm::ALL, &second, false).map_err(|e| TestCaseError::fail(e.to_string()))?;
        for entry in walk(&first) {
            let rel = entry.strip_prefix(&first).expect("prefix");
            if rel == std::path::Path::new("config.json") {
                continue;
            }
            let a = std::fs::read(&entry).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let b = std::fs::read(second.join(rel)).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert!(a == b, "{} differs", rel.display());
        }
        Ok(())
    })
}

pub fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

/// Failing runs return an error and leave a status file saying so.
pub fn failed_run_is_marked() -> Result<(), String> {
    run(CASES, 0u64..1000, |seed| {
        let dir = tempfile::tempdir().map_err(|e| TestCaseError::fail(e.to_string()))?;
        let out = dir.path().join("run");
        let mut cfg = tiny_experiment(seed, &out);
        cfg.data_dir = Some(dir.path().join("no-such-data"));
        prop_assert!(run_experiment(&cfg, &[Arm::Calibration], &out, false).is_err());
        let status: RunStatus = serde_json::from_str(&std::fs::read_to_string(out.join(STATUS_FILE)).expect("status"))
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(status.state, RunState::Failed);
        prop_assert!(status.error.is_some());

        let ok_out = dir.path().join("ok");
        let ok = tiny_experiment(seed, &ok_out);
        prop_assert!(run_experiment(&ok, &[Arm::Calibration], &ok_out, false).is_ok());
        let status: RunStatus = serde_json::from_str(&std::fs::read_to_string(ok_out.join(STATUS_FILE)).expect("status"))
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(status.state, RunState::Complete);
        Ok(())
    })
}

/// Groups of the evaluation used by the run artifacts come from training
/// counts of the same benchmark.
pub fn groups_follow_training_counts() -> Result<(), String> {
    run(CASES, 0u64..64, |seed| {
        let b = tiny_benchmark(seed);
        let g = benchmark_groups(&b, GroupThresholds::default());
        for k in b.held_out.iter() {
            prop_assert!(g.novel.contains(k));
        }
        prop_assert_eq!(g.frequency.len(), b.test_space.len());
        Ok(())
    })
}

pub fn all() -> Vec<Property> {
    let p = |module, statement, cases, check| Property {
        module,
        statement,
        cases,
        check,
    };
    vec![
        p("core_geometry", "iou is symmetric", 10_000, iou_symmetric),
        p("core_geometry", "iou agrees with a rasterized counting oracle", 10_000, iou_matches_raster),
        p("core_geometry", "nms output is a subset of its input", CASES, nms_output_is_subset),
        p("core_geometry", "raising the nms threshold never removes a survivor", CASES, nms_threshold_monotone),
        p("core_geometry", "wbf fused coordinates stay within member coordinates", CASES, wbf_weighted_mean_containment),
        p("labelspace", "novel_split is a partition", CASES, novel_split_partitions),
        p("labelspace", "union_spaces is associative and idempotent", CASES, union_associative_idempotent),
        p("labelspace", "embedding_matrix rows are unit norm", CASES, embedding_rows_unit_norm),
        p("synthworld", "novel split of the test space equals the held-out set", CASES, held_out_is_novel),
        p("synthworld", "visible annotations are a subset of full truth", CASES, visible_subset_of_truth),
        p("synthworld", "generation is bit-identical for equal inputs", CASES, generation_is_pure),
        p("detector_model", "cln_score is monotone in each argument", CASES, cln_monotone),
        p("detector_model", "cln_score is symmetric in s_r1 and s_r2", CASES, cln_localization_symmetric),
        p("detector_model", "classify_region is permutation-equivariant", CASES, classify_permutation_equivariant),
        p("detector_model", "propose returns at most top_k valid clipped boxes", CASES, propose_bounded_and_valid),
        p("detector_model", "eta is degree-1 homogeneous", CASES, cln_homogeneous),
        p("training", "classification stage never mutates the proposal network", CASES, decoupling_contract),
        p("training", "partitioned loss leaves other sources' embedding rows untouched", CASES, partitioned_gradient_isolation),
        p("training", "saturated correct example has vanishing loss", CASES, saturated_loss_vanishes),
        p("training", "training is bit-deterministic", CASES, training_is_deterministic),
        p("training", "analytic gradients match central differences", CASES, gradient_fd_default),
        p("inference", "calibration ranking law", CASES * 4, calibration_ranking_law),
        p("inference", "uniform prior keeps the per-proposal argmax", CASES, uniform_prior_keeps_argmax),
        p("inference", "final_score is monotone and homogeneous", CASES, final_score_monotone_homogeneous),
        p("inference", "end-to-end inference is byte-deterministic", CASES, inference_is_deterministic),
        p("inference", "every detection category is in the test space", CASES, detections_stay_in_test_space),
        p("evaluation", "a zero-score false positive never increases AP", CASES, zero_score_false_positive_never_helps),
        p("evaluation", "AP is invariant under monotone score maps", CASES, ap_is_rank_statistic),
        p("evaluation", "overall AP is the size-weighted mean of group APs", CASES, group_means_recombine),
        p("evaluation", "AR@1 <= AR@10 <= AR@100", CASES, recall_grows_with_k),
        p("evaluation", "groups follow training counts and the held-out set", CASES, groups_follow_training_counts),
        p("cli_orchestration", "the echoed config reproduces the run byte for byte", CASES, run_config_reproduces),
        p("cli_orchestration", "failed runs error and are marked partial", CASES, failed_run_is_marked),
    ]
}
