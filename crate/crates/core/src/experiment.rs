//! Ablation arms over seeds: train, infer, evaluate, aggregate.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::detector::EtaMode;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalGroups, EvalResult, GroupThresholds};
use crate::inference::{detect_dataset, run_open_world_raw, ImageDetections, InferenceConfig, PriorTable, RawDetections};
use crate::synthworld::{make_benchmark, Benchmark, BenchmarkSpec, WorldSpec};
use crate::training::{build_structure, EpochLoss, Structure, TrainConfig, TrainedSystem};

/// Environment variable holding a comma-separated seed list that replaces
/// the configured one.
pub const SEED_ENV: &str = "UNIWORLD_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub world: WorldSpec,
    pub benchmark: BenchmarkSpec,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub eval: GroupThresholds,
    pub output_dir: PathBuf,
    /// Generated datasets to load instead of generating in memory.
    pub data_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldSpec::default(),
            benchmark: BenchmarkSpec::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            eval: GroupThresholds::default(),
            output_dir: PathBuf::from("runs/default"),
            data_dir: None,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        self.world.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        if self.eval.rare_max >= self.eval.common_max {
            return Err(Error::Config("rare_max must be below common_max".into()));
        }
        Ok(())
    }

    /// Replace the seed list from a `1,2,3` style string.
    pub fn override_seeds(&mut self, text: &str) -> Result<()> {
        let seeds = text
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<u64>().map_err(|e| Error::Config(format!("bad seed `{s}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if seeds.is_empty() {
            return Err(Error::Config("seed override is empty".into()));
        }
        self.seeds = seeds;
        Ok(())
    }

    /// Apply [`SEED_ENV`] when set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => self.override_seeds(&v),
            Err(_) => Ok(()),
        }
    }

    /// World spec of one seed.
    pub fn world_for(&self, seed: u64) -> WorldSpec {
        WorldSpec {
            seed,
            ..self.world.clone()
        }
    }

    pub fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Structure,
    Decouple,
    Cln,
    Calibration,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Structure, Arm::Decouple, Arm::Cln, Arm::Calibration];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Structure => "structure",
            Arm::Decouple => "decouple",
            Arm::Cln => "cln",
            Arm::Calibration => "calibration",
        }
    }

    /// Variant names in report order.
    pub fn variants(self) -> &'static [&'static str] {
        match self {
            Arm::Structure => &["separate", "unified", "partitioned"],
            Arm::Decouple => &["decoupled", "joint", "joint_uncalibrated"],
            Arm::Cln => &["objectness_only", "localization_only", "cln"],
            Arm::Calibration => &["calibrated", "uncalibrated"],
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm `{s}`")))
    }
}

/// Result of one variant on one seed.
#[derive(Debug, Clone)]
pub struct VariantOutput {
    pub arm: Arm,
    pub variant: String,
    pub seed: u64,
    pub eval: EvalResult,
    pub detections: Vec<ImageDetections>,
    pub priors: Vec<(String, PriorTable)>,
}

/// Trained system groups shared between arms of one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum SystemKey {
    Partitioned,
    Unified,
    Separate,
    Joint,
}

/// Everything one seed needs; systems and raw detections are trained or
/// computed on first use and reused by later arms.
pub struct SeedRun {
    pub seed: u64,
    pub bench: Benchmark,
    pub groups: EvalGroups,
    cfg: ExperimentConfig,
    systems: BTreeMap<SystemKey, Vec<TrainedSystem>>,
    raws: BTreeMap<(SystemKey, EtaModeKey), Vec<RawDetections>>,
    pub losses: Vec<EpochLoss>,
}

type EtaModeKey = u8;

fn eta_key(m: EtaMode) -> EtaModeKey {
    match m {
        EtaMode::Cln => 0,
        EtaMode::ObjectnessOnly => 1,
        EtaMode::LocalizationOnly => 2,
    }
}

impl SeedRun {
    /// Generate the benchmark of `seed` in memory.
    pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let bench = make_benchmark(&cfg.world_for(seed), &cfg.benchmark).map_err(|e| e.in_stage("gen-data"))?;
        Ok(Self::with_benchmark(cfg, seed, bench))
    }

    pub fn with_benchmark(cfg: &ExperimentConfig, seed: u64, bench: Benchmark) -> Self {
        let groups = benchmark_groups(&bench, cfg.eval);
        SeedRun {
            seed,
            bench,
            groups,
            cfg: cfg.clone(),
            systems: BTreeMap::new(),
            raws: BTreeMap::new(),
            losses: Vec::new(),
        }
    }

    fn systems(&mut self, key: SystemKey) -> Result<&[TrainedSystem]> {
        if !self.systems.contains_key(&key) {
            let base = self.cfg.train_for(self.seed);
            let cfg = match key {
                SystemKey::Partitioned => TrainConfig {
                    structure: Structure::Partitioned,
                    decouple: true,
                    ..base
                },
                SystemKey::Unified => TrainConfig {
                    structure: Structure::Unified,
                    decouple: true,
                    ..base
                },
                SystemKey::Separate => TrainConfig {
                    structure: Structure::Separate,
                    decouple: true,
                    ..base
                },
                SystemKey::Joint => TrainConfig {
                    structure: Structure::Partitioned,
                    decouple: false,
                    ..base
                },
            };
            let mut run = build_structure(&self.bench.train, &cfg, &self.bench.table).map_err(|e| e.in_stage("train"))?;
            if key == SystemKey::Joint {
                for s in &mut run.systems {
                    s.name = "joint".into();
                }
                for l in &mut run.losses {
                    l.system = "joint".into();
                }
            }
            self.losses.extend(run.losses);
            self.systems.insert(key, run.systems);
        }
        Ok(&self.systems[&key])
    }

    fn raw(&mut self, key: SystemKey, mode: EtaMode) -> Result<(Vec<TrainedSystem>, Vec<RawDetections>)> {
        let systems = self.systems(key)?.to_vec();
        let rk = (key, eta_key(mode));
        if !self.raws.contains_key(&rk) {
            let icfg = InferenceConfig {
                eta_mode: mode,
                ..self.cfg.inference.clone()
            };
            let raws = systems
                .iter()
                .map(|s| detect_dataset(s, &self.bench.test.images, &self.bench.test_space, &self.bench.table, &icfg))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.in_stage("infer"))?;
            self.raws.insert(rk, raws);
        }
        Ok((systems, self.raws[&rk].clone()))
    }

    fn variant(&mut self, arm: Arm, name: &str, key: SystemKey, mode: EtaMode, calibrate: bool) -> Result<VariantOutput> {
        let (systems, raws) = self.raw(key, mode)?;
        let icfg = InferenceConfig {
            eta_mode: mode,
            calibrate,
            ..self.cfg.inference.clone()
        };
        let out = run_open_world_raw(&systems, &raws, &self.bench.train, &icfg).map_err(|e| e.in_stage("infer"))?;
        let eval = evaluate(&out.images, &self.bench.test, &self.groups).map_err(|e| e.in_stage("evaluate"))?;
        Ok(VariantOutput {
            arm,
            variant: name.to_string(),
            seed: self.seed,
            eval,
            detections: out.images,
            priors: out.priors,
        })
    }

    /// Trained systems of every group built so far, by name.
    pub fn trained(&self) -> Vec<&TrainedSystem> {
        self.systems.values().flatten().collect()
    }

    pub fn run_arm(&mut self, arm: Arm) -> Result<Vec<VariantOutput>> {
        let c = self.cfg.inference.calibrate;
        match arm {
            Arm::Structure => Ok(vec![
                self.variant(arm, "separate", SystemKey::Separate, EtaMode::Cln, c)?,
                self.variant(arm, "unified", SystemKey::Unified, EtaMode::Cln, c)?,
                self.variant(arm, "partitioned", SystemKey::Partitioned, EtaMode::Cln, c)?,
            ]),
            Arm::Decouple => Ok(vec![
                self.variant(arm, "decoupled", SystemKey::Partitioned, EtaMode::Cln, c)?,
                self.variant(arm, "joint", SystemKey::Joint, EtaMode::Cln, c)?,
                self.variant(arm, "joint_uncalibrated", SystemKey::Joint, EtaMode::Cln, false)?,
            ]),
            Arm::Cln => Ok(vec![
                self.variant(arm, "objectness_only", SystemKey::Partitioned, EtaMode::ObjectnessOnly, c)?,
                self.variant(arm, "localization_only", SystemKey::Partitioned, EtaMode::LocalizationOnly, c)?,
                self.variant(arm, "cln", SystemKey::Partitioned, EtaMode::Cln, c)?,
            ]),
            Arm::Calibration => Ok(vec![
                self.variant(arm, "calibrated", SystemKey::Partitioned, EtaMode::Cln, true)?,
                self.variant(arm, "uncalibrated", SystemKey::Partitioned, EtaMode::Cln, false)?,
            ]),
        }
    }
}

/// Frequency and novelty groups of a benchmark's test categories, from the
/// visible training annotations of every source.
pub fn benchmark_groups(bench: &Benchmark, thresholds: GroupThresholds) -> EvalGroups {
    let mut counts = BTreeMap::new();
    for d in &bench.train {
        for (k, c) in d.instance_counts() {
            *counts.entry(k).or_insert(0) += c;
        }
    }
    EvalGroups::from_train_counts(&bench.test_space, &counts, &bench.held_out, thresholds)
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}
