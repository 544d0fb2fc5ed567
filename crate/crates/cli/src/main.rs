use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use uniworld::evaluation::GroupThresholds;
use uniworld::experiment::{Arm, ExperimentConfig};
use uniworld::{report, runner};

#[derive(Parser)]
#[command(name = "uniworld", version, about = "Open-world detection experiments on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the benchmark of every seed.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        force: bool,
    },
    /// Train, infer and evaluate every variant of an ablation arm.
    Run {
        /// structure, decouple, cln, calibration or all.
        #[arg(long, default_value = "all")]
        arm: String,
        #[command(flatten)]
        common: CommonArgs,
        /// Generated datasets; without it, benchmarks are generated in memory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Aggregate finished runs into report.md and SVG charts.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Re-evaluate a detection file against a generated seed directory.
    Eval {
        /// A `seed_<s>` directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        /// Write the result here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        rare_max: Option<usize>,
        #[arg(long)]
        common_max: Option<usize>,
    },
    /// Print the resolved configuration.
    Config {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; overrides the config file and UNIWORLD_SEED.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    train_images: Option<usize>,
    #[arg(long)]
    test_images: Option<usize>,
    #[arg(long)]
    n_sources: Option<usize>,
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    novel_fraction: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
}

impl CommonArgs {
    /// Defaults, then the config file, then UNIWORLD_SEED, then flags.
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => ExperimentConfig::default(),
        };
        cfg.apply_seed_env()?;
        if let Some(s) = &self.seeds {
            cfg.override_seeds(s)?;
        }
        if let Some(p) = &self.out {
            cfg.output_dir = p.clone();
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.train_images {
            cfg.benchmark.train_images_per_source = v;
        }
        if let Some(v) = self.test_images {
            cfg.benchmark.test_images = v;
        }
        if let Some(v) = self.n_sources {
            cfg.benchmark.n_sources = v;
        }
        if let Some(v) = self.overlap {
            cfg.benchmark.overlap = v;
        }
        if let Some(v) = self.novel_fraction {
            cfg.benchmark.novel_fraction = v;
        }
        if let Some(v) = self.gamma {
            cfg.inference.gamma = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_arms(text: &str) -> Result<Vec<Arm>> {
    if text == "all" {
        return Ok(Arm::ALL.to_vec());
    }
    text.split(',').map(|a| Ok(a.trim().parse::<Arm>()?)).collect()
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, force } => {
            let cfg = common.resolve()?;
            let dirs = runner::generate_datasets(&cfg, &cfg.output_dir, force)?;
            for d in dirs {
                println!("{}", d.display());
            }
        }
        Command::Run {
            arm,
            common,
            data,
            force,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(d) = data {
                cfg.data_dir = Some(absolute(&d));
            }
            let arms = parse_arms(&arm)?;
            let out = cfg.output_dir.clone();
            let outputs = runner::run_experiment(&cfg, &arms, &out, force)?;
            for v in &outputs {
                println!(
                    "{}/{} seed {}: AP {:.2}",
                    v.arm.name(),
                    v.variant,
                    v.seed,
                    100.0 * v.eval.ap_overall
                );
            }
            println!("{}", out.display());
        }
        Command::Report { runs, out } => {
            let path = report::write_report(&runs, &out)?;
            println!("{}", path.display());
        }
        Command::Eval {
            data,
            detections,
            out,
            rare_max,
            common_max,
        } => {
            let defaults = GroupThresholds::default();
            let thresholds = GroupThresholds {
                rare_max: rare_max.unwrap_or(defaults.rare_max),
                common_max: common_max.unwrap_or(defaults.common_max),
            };
            let result = runner::evaluate_file(&data, &detections, thresholds)?;
            let text = serde_json::to_string_pretty(&result)? + "\n";
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
        }
        Command::Config { common } => {
            println!("{}", serde_json::to_string_pretty(&common.resolve()?)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
