//! Run directories: dataset generation, ablation runs and standalone
//! re-evaluation, with every artifact written to disk.
//!
//! A run directory holds `config.json` (the resolved configuration),
//! `status.json`, one directory per arm with `metrics.csv`, `summary.md` and
//! `seed_<s>/<variant>/{detections.jsonl,eval.json,prior.json}`, and per seed
//! the trained checkpoints and per-epoch losses.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalResult, GroupThresholds};
use crate::experiment::{benchmark_groups, Arm, ExperimentConfig, SeedRun, VariantOutput};
use crate::inference::{parse_jsonl, to_jsonl};
use crate::persist::{checkpoint_json, create_dir, prepare_output_dir, read_benchmark, seed_dir, write_benchmark, write_json};
use crate::report::{metrics_csv, summarize, summary_markdown, MetricsRow};
use crate::synthworld::make_benchmark;
use crate::training::EpochLoss;

pub const CONFIG_FILE: &str = "config.json";
pub const STATUS_FILE: &str = "status.json";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Running,
    Complete,
    Failed,
}

/// Written at the start of a run and rewritten when it ends, so a directory
/// left by a crashed or failed run is recognizable as partial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub state: RunState,
    pub arms: Vec<Arm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Generate the benchmark of every configured seed under `out`.
pub fn generate_datasets(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    // Validate the split before touching the output directory.
    make_benchmark(&cfg.world_for(cfg.seeds[0]), &cfg.benchmark)?;
    prepare_output_dir(out, force)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let world = cfg.world_for(seed);
            let bench = make_benchmark(&world, &cfg.benchmark)?;
            let dir = seed_dir(out, seed);
            write_benchmark(&dir, seed, &world, &cfg.benchmark, &bench)?;
            Ok(dir)
        })
        .collect()
}

fn load_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let Some(data) = &cfg.data_dir else {
        return SeedRun::generate(cfg, seed);
    };
    let stored = read_benchmark(&seed_dir(data, seed)).map_err(|e| e.in_stage("load-data"))?;
    if stored.world != cfg.world_for(seed) || stored.spec != cfg.benchmark {
        return Err(Error::Config(format!(
            "datasets in {} were generated with a different world or benchmark spec than this run's config",
            data.display()
        ))
        .in_stage("load-data"));
    }
    Ok(SeedRun::with_benchmark(cfg, seed, stored.bench))
}

fn variant_dir(out: &Path, v: &VariantOutput) -> PathBuf {
    out.join(v.arm.name()).join(format!("seed_{}", v.seed)).join(&v.variant)
}

fn write_variant(out: &Path, v: &VariantOutput) -> Result<()> {
    let dir = variant_dir(out, v);
    create_dir(&dir)?;
    let path = dir.join("detections.jsonl");
    fs::write(&path, to_jsonl(&v.detections)?).map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join("eval.json"), &v.eval)?;
    let priors: BTreeMap<&str, _> = v.priors.iter().map(|(k, p)| (k.as_str(), p)).collect();
    write_json(&dir.join("prior.json"), &priors)
}

fn losses_csv(losses: &[EpochLoss]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["system", "stage", "epoch", "loss"]).map_err(csv_error)?;
    for l in losses {
        w.write_record([l.system.clone(), l.stage.clone(), l.epoch.to_string(), format!("{:.9}", l.loss)])
            .map_err(csv_error)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?).map_err(|e| Error::Format(e.to_string()))
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

fn run_seed(cfg: &ExperimentConfig, arms: &[Arm], seed: u64, out: &Path) -> Result<Vec<VariantOutput>> {
    let mut run = load_seed(cfg, seed)?;
    let mut outputs = Vec::new();
    for &arm in arms {
        log::info!("seed {seed}: arm {}", arm.name());
        let vs = run.run_arm(arm)?;
        for v in &vs {
            write_variant(out, v).map_err(|e| e.in_stage("write"))?;
        }
        outputs.extend(vs);
    }
    let sdir = seed_dir(out, seed);
    let ckpt = sdir.join("checkpoints");
    create_dir(&ckpt)?;
    for s in run.trained() {
        let path = ckpt.join(format!("{}.json", s.name));
        fs::write(&path, checkpoint_json(s)?).map_err(|e| Error::io(&path, e))?;
    }
    let path = sdir.join(METRICS_FILE);
    fs::write(&path, losses_csv(&run.losses)?).map_err(|e| Error::io(&path, e))?;
    Ok(outputs)
}

fn write_status(out: &Path, state: RunState, arms: &[Arm], error: Option<String>) -> Result<()> {
    write_json(
        &out.join(STATUS_FILE),
        &RunStatus {
            state,
            arms: arms.to_vec(),
            error,
        },
    )
}

/// Run `arms` on every seed, writing a complete run directory to `out`.
/// Seeds run in parallel; within a seed, arms share trained systems.
pub fn run_experiment(cfg: &ExperimentConfig, arms: &[Arm], out: &Path, force: bool) -> Result<Vec<VariantOutput>> {
    cfg.validate()?;
    if arms.is_empty() {
        return Err(Error::Config("no arm selected".into()));
    }
    prepare_output_dir(out, force)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    write_status(out, RunState::Running, arms, None)?;
    let result = cfg
        .seeds
        .par_iter()
        .map(|&s| run_seed(cfg, arms, s, out))
        .collect::<Result<Vec<_>>>()
        .and_then(|per_seed| {
            let all: Vec<VariantOutput> = per_seed.into_iter().flatten().collect();
            write_arm_tables(out, arms, &all)?;
            Ok(all)
        });
    match &result {
        Ok(_) => write_status(out, RunState::Complete, arms, None)?,
        Err(e) => write_status(out, RunState::Failed, arms, Some(e.to_string()))?,
    }
    result
}

fn write_arm_tables(out: &Path, arms: &[Arm], all: &[VariantOutput]) -> Result<()> {
    for &arm in arms {
        let rows: Vec<MetricsRow> = all.iter().filter(|v| v.arm == arm).map(MetricsRow::from_output).collect();
        let dir = out.join(arm.name());
        create_dir(&dir)?;
        let path = dir.join(METRICS_FILE);
        fs::write(&path, metrics_csv(&rows)?).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("summary.md");
        fs::write(&path, summary_markdown(arm.name(), &summarize(&rows))).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Evaluate a detection file against the test split of a generated seed
/// directory.
pub fn evaluate_file(data: &Path, detections: &Path, thresholds: GroupThresholds) -> Result<EvalResult> {
    let stored = read_benchmark(data).map_err(|e| e.in_stage("load-data"))?;
    let text = fs::read_to_string(detections).map_err(|e| Error::io(detections, e))?;
    let dets = parse_jsonl(&text).map_err(|e| e.in_stage("parse-detections"))?;
    let groups = benchmark_groups(&stored.bench, thresholds);
    evaluate(&dets, &stored.bench.test, &groups).map_err(|e| e.in_stage("evaluate"))
}
