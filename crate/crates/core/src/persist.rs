//! On-disk formats: generated benchmarks, feature grids and checkpoints.
//!
//! A generated seed directory holds `manifest.json`, `embeddings.json` and
//! one directory per split (`train_0`, `train_1`, ..., `test`), each with an
//! `annotations.json` and `images/<index>.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::detector::{AnchorSpec, ProposalNetParams, RoIClassifierParams};
use crate::error::{Error, Result};
use crate::labelspace::{Category, EmbeddingTable, LabelSpace};
use crate::synthworld::{Benchmark, BenchmarkSpec, DetDataset, SceneObject, SyntheticImage, WorldSpec};
use crate::training::{Structure, TrainConfig, TrainedSystem};

pub const IMAGE_HEADER_LEN: usize = 8;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.json";
pub const ANNOTATIONS_FILE: &str = "annotations.json";
const FORMAT_VERSION: u32 = 1;

/// Decoded feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub size: usize,
    pub dim: usize,
    /// Row-major `[y][x][d]`.
    pub features: Vec<f32>,
}

/// Header `(u32 size, u32 dim)` little endian, then `size * size * dim`
/// little-endian `f32` values.
pub fn encode_image(img: &SyntheticImage) -> Result<Vec<u8>> {
    let size = u32::try_from(img.size).map_err(|_| Error::Format("image size exceeds u32".into()))?;
    let dim = u32::try_from(img.dim).map_err(|_| Error::Format("feature dim exceeds u32".into()))?;
    if img.features.len() != img.size * img.size * img.dim {
        return Err(Error::Dimension {
            expected: img.size * img.size * img.dim,
            actual: img.features.len(),
        });
    }
    let mut out = Vec::with_capacity(IMAGE_HEADER_LEN + 4 * img.features.len());
    out.extend_from_slice(&size.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for v in &img.features {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_image_bytes(bytes: &[u8]) -> Result<ImageGrid> {
    if bytes.len() < IMAGE_HEADER_LEN {
        return Err(Error::Format(format!("image file of {} bytes has no header", bytes.len())));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]) as usize;
    let (size, dim) = (word(0), word(4));
    if size == 0 || dim == 0 {
        return Err(Error::Format(format!("image header has size {size} and dim {dim}")));
    }
    let n = size
        .checked_mul(size)
        .and_then(|c| c.checked_mul(dim))
        .ok_or_else(|| Error::Format("image header overflows".into()))?;
    let body = &bytes[IMAGE_HEADER_LEN..];
    if n.checked_mul(4) != Some(body.len()) {
        return Err(Error::Format(format!(
            "image header promises {n} values but {} bytes follow",
            body.len()
        )));
    }
    let features: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("image holds a non-finite value".into()));
    }
    Ok(ImageGrid { size, dim, features })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CategoryName {
    key: String,
    name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub dir: String,
    pub name: String,
    pub label_space: LabelSpace,
    pub image_ids: Vec<String>,
}

/// Everything needed to rebuild a benchmark besides pixels and boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub seed: u64,
    pub world: WorldSpec,
    pub benchmark: BenchmarkSpec,
    categories: Vec<CategoryName>,
    pub test_space: LabelSpace,
    pub held_out: LabelSpace,
    pub splits: Vec<SplitEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ImageAnnotations {
    image_id: String,
    full_truth: Vec<SceneObject>,
    visible: Vec<SceneObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Annotations {
    images: Vec<ImageAnnotations>,
}

/// A benchmark together with the specs that generated it.
#[derive(Debug, Clone)]
pub struct StoredBenchmark {
    pub seed: u64,
    pub world: WorldSpec,
    pub spec: BenchmarkSpec,
    pub bench: Benchmark,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Make `path` an empty directory. An existing non-empty one is an error
/// unless `force`, in which case it is cleared.
pub fn prepare_output_dir(path: &Path, force: bool) -> Result<()> {
    if path.exists() {
        let mut entries = fs::read_dir(path).map_err(|e| Error::io(path, e))?;
        if entries.next().is_some() {
            if !force {
                return Err(Error::Config(format!(
                    "output directory {} is not empty (use --force to overwrite)",
                    path.display()
                )));
            }
            fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
        }
    }
    create_dir(path)
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

fn write_split(dir: &Path, d: &DetDataset) -> Result<()> {
    let images = dir.join("images");
    create_dir(&images)?;
    for (i, img) in d.images.iter().enumerate() {
        write_file(&images.join(format!("{i:05}.bin")), &encode_image(img)?)?;
    }
    let ann = Annotations {
        images: d
            .images
            .iter()
            .zip(&d.visible)
            .map(|(img, vis)| ImageAnnotations {
                image_id: img.image_id.clone(),
                full_truth: img.full_truth.clone(),
                visible: vis.clone(),
            })
            .collect(),
    };
    write_json(&dir.join(ANNOTATIONS_FILE), &ann)
}

fn split_entry(dir: &str, d: &DetDataset) -> SplitEntry {
    SplitEntry {
        dir: dir.to_string(),
        name: d.name.clone(),
        label_space: d.label_space.clone(),
        image_ids: d.images.iter().map(|i| i.image_id.clone()).collect(),
    }
}

/// Write one generated benchmark into `dir` (created if needed).
pub fn write_benchmark(dir: &Path, seed: u64, world: &WorldSpec, spec: &BenchmarkSpec, bench: &Benchmark) -> Result<()> {
    create_dir(dir)?;
    let mut splits = Vec::new();
    for (i, d) in bench.train.iter().enumerate() {
        let name = format!("train_{i}");
        write_split(&dir.join(&name), d)?;
        splits.push(split_entry(&name, d));
    }
    write_split(&dir.join("test"), &bench.test)?;
    splits.push(split_entry("test", &bench.test));
    let manifest = Manifest {
        format: FORMAT_VERSION,
        seed,
        world: world.clone(),
        benchmark: spec.clone(),
        categories: bench
            .categories
            .iter()
            .map(|c| CategoryName {
                key: c.key.clone(),
                name: c.name.clone(),
            })
            .collect(),
        test_space: bench.test_space.clone(),
        held_out: bench.held_out.clone(),
        splits,
    };
    write_json(&dir.join(EMBEDDINGS_FILE), &bench.table)?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

fn read_split(dir: &Path, entry: &SplitEntry, world: &WorldSpec) -> Result<DetDataset> {
    let ann: Annotations = read_json(&dir.join(ANNOTATIONS_FILE))?;
    if ann.images.len() != entry.image_ids.len() {
        return Err(Error::Format(format!(
            "{}: {} annotated images but the manifest lists {}",
            dir.display(),
            ann.images.len(),
            entry.image_ids.len()
        )));
    }
    let mut images = Vec::with_capacity(ann.images.len());
    let mut visible = Vec::with_capacity(ann.images.len());
    for (i, (a, id)) in ann.images.into_iter().zip(&entry.image_ids).enumerate() {
        if &a.image_id != id {
            return Err(Error::Format(format!("{}: image {i} is `{}`, manifest says `{id}`", dir.display(), a.image_id)));
        }
        let path = dir.join("images").join(format!("{i:05}.bin"));
        let grid = decode_image_bytes(&read_file(&path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if grid.size != world.image_size || grid.dim != world.dim {
            return Err(Error::Format(format!(
                "{}: grid {}x{}x{} does not match the world's {}x{}x{}",
                path.display(),
                grid.size,
                grid.size,
                grid.dim,
                world.image_size,
                world.image_size,
                world.dim
            )));
        }
        images.push(SyntheticImage {
            image_id: a.image_id,
            size: grid.size,
            dim: grid.dim,
            features: grid.features,
            full_truth: a.full_truth,
        });
        visible.push(a.visible);
    }
    let d = DetDataset {
        name: entry.name.clone(),
        label_space: entry.label_space.clone(),
        images,
        visible,
    };
    d.check_invariants()?;
    Ok(d)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = read_json(&dir.join(MANIFEST_FILE))?;
    if m.format != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported dataset format {}", m.format)));
    }
    Ok(m)
}

/// Load a benchmark written by [`write_benchmark`].
pub fn read_benchmark(dir: &Path) -> Result<StoredBenchmark> {
    let m = read_manifest(dir)?;
    let table: EmbeddingTable = read_json(&dir.join(EMBEDDINGS_FILE))?;
    let (test_entry, train_entries) = m
        .splits
        .split_last()
        .filter(|(t, _)| t.dir == "test")
        .ok_or_else(|| Error::Format("manifest has no test split".into()))?;
    let train = train_entries
        .iter()
        .map(|e| read_split(&dir.join(&e.dir), e, &m.world))
        .collect::<Result<Vec<_>>>()?;
    let test = read_split(&dir.join(&test_entry.dir), test_entry, &m.world)?;
    let categories = m
        .categories
        .iter()
        .map(|c| {
            Ok(Category {
                key: c.key.clone(),
                name: c.name.clone(),
                semantic_vector: table.get(&c.key)?.to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StoredBenchmark {
        seed: m.seed,
        world: m.world,
        spec: m.benchmark,
        bench: Benchmark {
            categories,
            table,
            train,
            test,
            test_space: m.test_space,
            held_out: m.held_out,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiWeights {
    /// `[E, D]`.
    pub shape: [usize; 2],
    /// Row-major projection.
    pub projection: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEntry {
    pub source: String,
    pub label_space: LabelSpace,
}

/// Serialized [`TrainedSystem`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub name: String,
    pub structure: Structure,
    pub decoupled: bool,
    pub proposal: ProposalNetParams,
    pub roi: RoiWeights,
    pub tau: f64,
    pub anchors: AnchorSpec,
    pub heads: Vec<HeadEntry>,
    pub config: TrainConfig,
}

impl From<&TrainedSystem> for Checkpoint {
    fn from(s: &TrainedSystem) -> Self {
        let (e, d) = s.roi.projection.dim();
        Checkpoint {
            name: s.name.clone(),
            structure: s.structure,
            decoupled: s.decoupled,
            proposal: s.proposal.clone(),
            roi: RoiWeights {
                shape: [e, d],
                projection: s.roi.projection.iter().copied().collect(),
                bias: s.roi.bias,
            },
            tau: s.roi.tau,
            anchors: s.anchors.clone(),
            heads: s
                .heads
                .iter()
                .map(|(source, space)| HeadEntry {
                    source: source.clone(),
                    label_space: space.clone(),
                })
                .collect(),
            config: s.provenance.clone(),
        }
    }
}

impl Checkpoint {
    pub fn into_system(self) -> Result<TrainedSystem> {
        self.proposal.validate()?;
        let [e, d] = self.roi.shape;
        let projection = Array2::from_shape_vec((e, d), self.roi.projection).map_err(|err| Error::Format(format!("projection: {err}")))?;
        let roi = RoIClassifierParams::new(projection, self.tau)?.with_bias(self.roi.bias)?;
        Ok(TrainedSystem {
            name: self.name,
            structure: self.structure,
            decoupled: self.decoupled,
            proposal: self.proposal,
            roi,
            anchors: self.anchors,
            heads: self.heads.into_iter().map(|h| (h.source, h.label_space)).collect(),
            provenance: self.config,
        })
    }
}

pub fn checkpoint_json(system: &TrainedSystem) -> Result<String> {
    let mut text = serde_json::to_string_pretty(&Checkpoint::from(system))?;
    text.push('\n');
    Ok(text)
}

pub fn parse_checkpoint(text: &str) -> Result<TrainedSystem> {
    let c: Checkpoint = serde_json::from_str(text)?;
    c.into_system()
}
