//! Procedural detection world.
//!
//! Visual features and category embeddings live in one space: every cell
//! covered by an object holds that category's embedding plus Gaussian noise,
//! and background cells hold noise only. Recognizing a category never seen
//! during training is therefore possible in principle, which is what makes
//! open-world accuracy measurable here.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, weighted::WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoxXYXY};
use crate::labelspace::{Category, EmbeddingTable, LabelSpace};
use crate::rng::{stream, Rng};

/// Max |cos| allowed between two category vectors before one is redrawn.
pub const MAX_CATEGORY_COSINE: f64 = 0.95;
/// Max pairwise IoU between objects placed in one scene.
pub const MAX_LAYOUT_IOU: f64 = 0.3;
const PLACEMENT_TRIES: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub image_size: usize,
    /// Shared feature / embedding dimension.
    pub dim: usize,
    pub noise_sigma: f64,
    pub n_categories: usize,
    /// Inclusive range of objects attempted per image.
    pub objects_per_image: (usize, usize),
    /// Inclusive range of object side lengths, in cells.
    pub object_size: (usize, usize),
    /// Power-law exponent of category frequencies.
    pub frequency_exponent: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            image_size: 32,
            dim: 16,
            noise_sigma: 0.3,
            n_categories: 40,
            objects_per_image: (2, 5),
            object_size: (4, 12),
            frequency_exponent: 1.2,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size < 8 {
            return fail(format!("image_size {} < 8", self.image_size));
        }
        if self.n_categories < 2 {
            return fail(format!("n_categories {} < 2", self.n_categories));
        }
        if self.dim == 0 {
            return fail("dim must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma));
        }
        let (lo, hi) = self.objects_per_image;
        if lo > hi {
            return fail(format!("objects_per_image range ({lo}, {hi}) is empty"));
        }
        let (smin, smax) = self.object_size;
        if smin < 2 || smin > smax || smax > self.image_size {
            return fail(format!(
                "object_size ({smin}, {smax}) must satisfy 2 <= min <= max <= image_size"
            ));
        }
        if !(self.frequency_exponent >= 0.0 && self.frequency_exponent.is_finite()) {
            return fail("frequency_exponent must be finite and >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
    #[serde(rename = "category")]
    pub category_key: String,
}

/// Feature grid of `size x size x dim`, row-major `[y][x][d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub image_id: String,
    pub size: usize,
    pub dim: usize,
    pub features: Vec<f32>,
    pub full_truth: Vec<SceneObject>,
}

impl SyntheticImage {
    pub fn cell(&self, x: usize, y: usize) -> &[f32] {
        let o = (y * self.size + x) * self.dim;
        &self.features[o..o + self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetDataset {
    pub name: String,
    pub label_space: LabelSpace,
    pub images: Vec<SyntheticImage>,
    /// Per image, the annotations this source actually provides.
    pub visible: Vec<Vec<SceneObject>>,
}

impl DetDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Visible instance count per category.
    pub fn instance_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for obj in self.visible.iter().flatten() {
            *counts.entry(obj.category_key.clone()).or_insert(0) += 1;
        }
        counts
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.visible.len() != self.images.len() {
            return Err(Error::Format(format!(
                "dataset `{}` has {} images but {} annotation lists",
                self.name,
                self.images.len(),
                self.visible.len()
            )));
        }
        for obj in self.visible.iter().flatten() {
            if !self.label_space.contains(&obj.category_key) {
                return Err(Error::UnknownCategory(obj.category_key.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub n_sources: usize,
    pub overlap: f64,
    pub novel_fraction: f64,
    pub train_images_per_source: usize,
    pub test_images: usize,
    /// Source whose visible annotations are randomly thinned.
    pub noisy_source: Option<usize>,
    pub annotation_drop_rate: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            n_sources: 2,
            overlap: 0.5,
            novel_fraction: 0.25,
            train_images_per_source: 300,
            test_images: 100,
            noisy_source: None,
            annotation_drop_rate: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub categories: Vec<Category>,
    pub table: EmbeddingTable,
    pub train: Vec<DetDataset>,
    pub test: DetDataset,
    pub test_space: LabelSpace,
    /// Categories deliberately absent from every training space.
    pub held_out: LabelSpace,
}

pub fn category_key(i: usize) -> String {
    format!("c{i:03}")
}

fn random_unit(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Seeded i.i.d. unit vectors, one per category. Any vector too close to an
/// earlier one is redrawn.
pub fn make_categories(spec: &WorldSpec) -> Result<(Vec<Category>, EmbeddingTable)> {
    let mut rng = stream(spec.seed, "categories", 0);
    let mut cats: Vec<Category> = Vec::with_capacity(spec.n_categories);
    for i in 0..spec.n_categories {
        let v = loop {
            let cand = random_unit(&mut rng, spec.dim);
            let clash = cats.iter().any(|c| {
                let cos: f64 = c.semantic_vector.iter().zip(&cand).map(|(a, b)| a * b).sum();
                cos.abs() >= MAX_CATEGORY_COSINE
            });
            if !clash {
                break cand;
            }
        };
        cats.push(Category {
            key: category_key(i),
            name: format!("category {i}"),
            semantic_vector: v,
        });
    }
    let table = EmbeddingTable::from_categories(spec.dim, &cats)?;
    Ok((cats, table))
}

fn cell_span(lo: f64, hi: f64, size: usize) -> (usize, usize) {
    let a = (lo - 0.5).ceil().max(0.0) as usize;
    let b = ((hi - 0.5).ceil().max(0.0) as usize).min(size);
    (a.min(size), b)
}

/// Rasterize objects onto a noise background. Later objects occlude earlier
/// ones.
pub fn render_scene(
    spec: &WorldSpec,
    image_id: impl Into<String>,
    objects: &[SceneObject],
    table: &EmbeddingTable,
    rng: &mut Rng,
) -> Result<SyntheticImage> {
    let (size, dim) = (spec.image_size, spec.dim);
    let noise: Vec<f64> = (0..size * size * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            spec.noise_sigma * z
        })
        .collect();
    let mut painted: Vec<Option<&[f64]>> = vec![None; size * size];
    for obj in objects {
        let v = table.get(&obj.category_key)?;
        if v.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                actual: v.len(),
            });
        }
        let (x0, x1) = cell_span(obj.bbox.x1, obj.bbox.x2, size);
        let (y0, y1) = cell_span(obj.bbox.y1, obj.bbox.y2, size);
        for y in y0..y1 {
            for slot in &mut painted[y * size + x0..y * size + x1] {
                *slot = Some(v);
            }
        }
    }
    let mut features = Vec::with_capacity(size * size * dim);
    for (cell, signal) in painted.iter().enumerate() {
        let n = &noise[cell * dim..(cell + 1) * dim];
        match signal {
            Some(v) => features.extend(v.iter().zip(n).map(|(s, e)| (s + e) as f32)),
            None => features.extend(n.iter().map(|e| *e as f32)),
        }
    }
    Ok(SyntheticImage {
        image_id: image_id.into(),
        size,
        dim,
        features,
        full_truth: objects.to_vec(),
    })
}

/// Random non-crowded layout; placements that would overlap an earlier object
/// beyond [`MAX_LAYOUT_IOU`] are retried and eventually skipped.
pub fn sample_layout(
    spec: &WorldSpec,
    categories: &[String],
    weights: &WeightedIndex<f64>,
    rng: &mut Rng,
) -> Vec<SceneObject> {
    let (lo, hi) = spec.objects_per_image;
    let n = rng.random_range(lo..=hi);
    let (smin, smax) = spec.object_size;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    for _ in 0..n {
        let cat = &categories[weights.sample(rng)];
        for _ in 0..PLACEMENT_TRIES {
            let s = rng.random_range(smin..=smax);
            let jitter = (s / 4) as i64;
            let w = s;
            let h = (s as i64 + rng.random_range(-jitter..=jitter)).clamp(2, spec.image_size as i64) as usize;
            let x = rng.random_range(0..=spec.image_size - w);
            let y = rng.random_range(0..=spec.image_size - h);
            let (w, h) = if rng.random_bool(0.5) { (w, h) } else { (h, w) };
            let (x, y) = (x.min(spec.image_size - w), y.min(spec.image_size - h));
            let bbox = BoxXYXY {
                x1: x as f64,
                y1: y as f64,
                x2: (x + w) as f64,
                y2: (y + h) as f64,
            };
            if objects.iter().all(|o| iou(&o.bbox, &bbox) <= MAX_LAYOUT_IOU) {
                objects.push(SceneObject {
                    bbox,
                    category_key: cat.clone(),
                });
                break;
            }
        }
    }
    objects
}

/// Power-law weights over categories, ranked by a seeded permutation.
pub fn frequency_weights(spec: &WorldSpec) -> Vec<f64> {
    let mut ranks: Vec<usize> = (0..spec.n_categories).collect();
    ranks.shuffle(&mut stream(spec.seed, "frequency", 0));
    ranks
        .iter()
        .map(|&r| ((r + 1) as f64).powf(-spec.frequency_exponent))
        .collect()
}

/// Per-source label spaces over `base`, sharing `round(overlap * m)` keys
/// where `m = |base| / (overlap + n (1 - overlap))` is the target space size.
pub fn split_sources(base: &[String], n_sources: usize, overlap: f64) -> Result<Vec<LabelSpace>> {
    if n_sources == 0 {
        return Err(Error::Config("n_sources must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap {overlap} outside [0, 1]")));
    }
    let b = base.len();
    let n = n_sources as f64;
    let m = b as f64 / (overlap + n * (1.0 - overlap));
    let shared = ((overlap * m).round() as usize).min(b);
    let exclusive = b - shared;
    if n_sources > 1 && overlap < 1.0 && exclusive < n_sources {
        return Err(Error::Config(format!(
            "{b} base categories cannot give {n_sources} sources distinct categories at overlap {overlap}"
        )));
    }
    let mut spaces: Vec<Vec<String>> = vec![base[..shared].to_vec(); n_sources];
    for (i, k) in base[shared..].iter().enumerate() {
        spaces[i % n_sources].push(k.clone());
    }
    let spaces = spaces
        .into_iter()
        .map(|mut keys| {
            keys.sort();
            LabelSpace::new(keys)
        })
        .collect::<Result<Vec<_>>>()?;
    if spaces.iter().any(LabelSpace::is_empty) {
        return Err(Error::Config(format!(
            "{b} base categories leave a source with an empty label space"
        )));
    }
    Ok(spaces)
}

fn make_images(
    spec: &WorldSpec,
    table: &EmbeddingTable,
    keys: &[String],
    weights: &WeightedIndex<f64>,
    tag: &str,
    count: usize,
) -> Result<Vec<SyntheticImage>> {
    (0..count)
        .map(|i| {
            let mut rng = stream(spec.seed, tag, i as u64);
            let objects = sample_layout(spec, keys, weights, &mut rng);
            render_scene(spec, format!("{tag}_{i:05}"), &objects, table, &mut rng)
        })
        .collect()
}

/// Generate multi-source training sets with heterogeneous label spaces and an
/// open-world test set over every category.
pub fn make_benchmark(spec: &WorldSpec, bench: &BenchmarkSpec) -> Result<Benchmark> {
    spec.validate()?;
    if !(0.0..1.0).contains(&bench.novel_fraction) {
        return Err(Error::Config(format!(
            "novel_fraction {} outside [0, 1)",
            bench.novel_fraction
        )));
    }
    if !(0.0..=1.0).contains(&bench.annotation_drop_rate) {
        return Err(Error::Config("annotation_drop_rate outside [0, 1]".into()));
    }
    if let Some(s) = bench.noisy_source {
        if s >= bench.n_sources {
            return Err(Error::Config(format!("noisy_source {s} >= n_sources")));
        }
    }

    let (categories, table) = make_categories(spec)?;
    let all_keys: Vec<String> = categories.iter().map(|c| c.key.clone()).collect();

    let mut shuffled = all_keys.clone();
    shuffled.shuffle(&mut stream(spec.seed, "split", 0));
    let n_novel = (bench.novel_fraction * spec.n_categories as f64).round() as usize;
    if n_novel >= spec.n_categories {
        return Err(Error::Config("novel_fraction leaves no base categories".into()));
    }
    let mut novel: Vec<String> = shuffled[..n_novel].to_vec();
    novel.sort();
    let base: Vec<String> = shuffled[n_novel..].to_vec();
    let spaces = split_sources(&base, bench.n_sources, bench.overlap)?;

    let weights = WeightedIndex::new(frequency_weights(spec))
        .map_err(|e| Error::Config(format!("frequency weights: {e}")))?;

    let mut train = Vec::with_capacity(bench.n_sources);
    for (s, space) in spaces.into_iter().enumerate() {
        let tag = format!("s{s}");
        let images = make_images(spec, &table, &all_keys, &weights, &tag, bench.train_images_per_source)?;
        let mut drop_rng = stream(spec.seed, "drop", s as u64);
        let noisy = bench.noisy_source == Some(s);
        let visible = images
            .iter()
            .map(|img| {
                img.full_truth
                    .iter()
                    .filter(|o| space.contains(&o.category_key))
                    .filter(|_| !noisy || !drop_rng.random_bool(bench.annotation_drop_rate))
                    .cloned()
                    .collect()
            })
            .collect();
        train.push(DetDataset {
            name: format!("train_{s}"),
            label_space: space,
            images,
            visible,
        });
    }

    let test_space = LabelSpace::new(all_keys.clone())?;
    let test_images = make_images(spec, &table, &all_keys, &weights, "test", bench.test_images)?;
    let test_visible = test_images.iter().map(|i| i.full_truth.clone()).collect();
    let test = DetDataset {
        name: "test".into(),
        label_space: test_space.clone(),
        images: test_images,
        visible: test_visible,
    };

    Ok(Benchmark {
        categories,
        table,
        train,
        test,
        test_space,
        held_out: LabelSpace::new(novel)?,
    })
}

/// Keys used by objects in `images`, for sanity checks.
pub fn keys_present(images: &[SyntheticImage]) -> HashSet<String> {
    images
        .iter()
        .flat_map(|i| i.full_truth.iter().map(|o| o.category_key.clone()))
        .collect()
}
