//! Seed-median aggregation of run metrics, markdown tables and SVG charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::{median, ExperimentConfig, VariantOutput};
use crate::persist::{create_dir, write_json};
use crate::runner::{csv_error, RunState, RunStatus, CONFIG_FILE, METRICS_FILE, STATUS_FILE};

/// Metric columns of `metrics.csv`, after `arm,variant,seed`.
pub const METRIC_COLUMNS: [&str; 10] = [
    "ap",
    "ap50",
    "ap_base",
    "ap_novel",
    "ap_rare",
    "ap_common",
    "ap_frequent",
    "ar1",
    "ar10",
    "ar100",
];

/// One `metrics.csv` row; a missing value is an undefined metric (for
/// example a frequency group with no test instances).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub arm: String,
    pub variant: String,
    pub seed: u64,
    pub values: BTreeMap<String, Option<f64>>,
}

impl MetricsRow {
    pub fn from_output(v: &VariantOutput) -> Self {
        let values = v
            .eval
            .csv_fields()
            .into_iter()
            .map(|(k, s)| (k, s.parse::<f64>().ok()))
            .collect();
        MetricsRow {
            arm: v.arm.name().to_string(),
            variant: v.variant.clone(),
            seed: v.seed,
            values,
        }
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.values.get(metric).copied().flatten()
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = ["arm", "variant", "seed"].into_iter().chain(METRIC_COLUMNS);
    w.write_record(header).map_err(csv_error)?;
    for r in rows {
        let mut rec = vec![r.arm.clone(), r.variant.clone(), r.seed.to_string()];
        rec.extend(METRIC_COLUMNS.iter().map(|c| r.get(c).map(|v| format!("{v:.6}")).unwrap_or_default()));
        w.write_record(rec).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().map_err(csv_error)?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("metrics csv lacks column `{name}`")))
    };
    let (arm, variant, seed) = (col("arm")?, col("variant")?, col("seed")?);
    let metrics: Vec<(usize, &str)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| ![arm, variant, seed].contains(i))
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_error)?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let seed = field(seed)
            .parse::<u64>()
            .map_err(|e| Error::Format(format!("bad seed `{}`: {e}", field(seed))))?;
        let mut values = BTreeMap::new();
        for &(i, name) in &metrics {
            let cell = field(i);
            let v = if cell.is_empty() {
                None
            } else {
                let x = cell
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad `{name}` value `{cell}`: {e}")))?;
                if !x.is_finite() {
                    return Err(Error::Format(format!("non-finite `{name}` value")));
                }
                Some(x)
            };
            values.insert(name.to_string(), v);
        }
        rows.push(MetricsRow {
            arm: field(arm).to_string(),
            variant: field(variant).to_string(),
            seed,
            values,
        });
    }
    Ok(rows)
}

/// Seed medians of one variant. A metric's median uses the seeds where it is
/// defined.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub arm: String,
    pub variant: String,
    pub seeds: Vec<u64>,
    pub medians: BTreeMap<String, Option<f64>>,
}

impl VariantSummary {
    pub fn get(&self, metric: &str) -> Option<f64> {
        self.medians.get(metric).copied().flatten()
    }
}

/// Group rows by (arm, variant) in first-appearance order.
pub fn summarize(rows: &[MetricsRow]) -> Vec<VariantSummary> {
    let mut order: Vec<(String, String)> = Vec::new();
    for r in rows {
        let k = (r.arm.clone(), r.variant.clone());
        if !order.contains(&k) {
            order.push(k);
        }
    }
    order
        .into_iter()
        .map(|(arm, variant)| {
            let group: Vec<&MetricsRow> = rows.iter().filter(|r| r.arm == arm && r.variant == variant).collect();
            let mut seeds: Vec<u64> = group.iter().map(|r| r.seed).collect();
            seeds.sort_unstable();
            let mut names: Vec<&String> = group.iter().flat_map(|r| r.values.keys()).collect();
            names.sort();
            names.dedup();
            let medians = names
                .into_iter()
                .map(|m| {
                    let vals: Vec<f64> = group.iter().filter_map(|r| r.get(m)).collect();
                    (m.clone(), median(&vals))
                })
                .collect();
            VariantSummary {
                arm,
                variant,
                seeds,
                medians,
            }
        })
        .collect()
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "n/a".into())
}

/// Markdown table of seed medians, in AP points.
pub fn summary_markdown(title: &str, summaries: &[VariantSummary]) -> String {
    let mut s = format!("## {title}\n\nMedian over seeds, AP in points.\n\n");
    s.push_str("| variant | seeds | AP | AP50 | AP base | AP novel | AP rare | AP common | AP frequent | AR@100 |\n");
    s.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
    for v in summaries {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            v.variant,
            v.seeds.len(),
            pct(v.get("ap")),
            pct(v.get("ap50")),
            pct(v.get("ap_base")),
            pct(v.get("ap_novel")),
            pct(v.get("ap_rare")),
            pct(v.get("ap_common")),
            pct(v.get("ap_frequent")),
            pct(v.get("ar100")),
        );
    }
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Grouped bar chart of median base and novel AP per variant.
pub fn bar_chart_svg(title: &str, summaries: &[VariantSummary]) -> String {
    const BAR: f64 = 28.0;
    const GAP: f64 = 36.0;
    const LEFT: f64 = 50.0;
    const TOP: f64 = 40.0;
    const PLOT_H: f64 = 220.0;
    let series = [("ap_base", "base", "#4c78a8"), ("ap_novel", "novel", "#f58518")];
    let top = summaries
        .iter()
        .flat_map(|v| series.iter().filter_map(|(m, _, _)| v.get(m)))
        .fold(0.0f64, f64::max);
    let y_max = ((100.0 * top) / 10.0).ceil().max(1.0) * 10.0;
    let group_w = BAR * series.len() as f64 + GAP;
    let width = LEFT + group_w * summaries.len().max(1) as f64 + 110.0;
    let height = TOP + PLOT_H + 60.0;
    let y = |v: f64| TOP + PLOT_H * (1.0 - v / y_max);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{LEFT}" y="20" font-size="14">{}</text>"#, xml_escape(title));
    for i in 0..=5 {
        let v = y_max * i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.0}</text>"##,
            width - 110.0,
            y(v),
            y(v),
            LEFT - 6.0,
            y(v) + 4.0
        );
    }
    for (gi, v) in summaries.iter().enumerate() {
        let x0 = LEFT + GAP / 2.0 + group_w * gi as f64;
        for (si, (m, _, color)) in series.iter().enumerate() {
            let Some(val) = v.get(m) else { continue };
            let h = 100.0 * val;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{BAR}" height="{:.1}" fill="{color}"><title>{}: {h:.2}</title></rect>"#,
                x0 + BAR * si as f64,
                y(h),
                TOP + PLOT_H - y(h),
                xml_escape(&v.variant)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x0 + BAR * series.len() as f64 / 2.0,
            TOP + PLOT_H + 16.0,
            xml_escape(&v.variant)
        );
    }
    for (si, (_, label, color)) in series.iter().enumerate() {
        let ly = TOP + 14.0 * si as f64;
        let lx = width - 100.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}">{label} AP</text>"#,
            ly - 9.0,
            lx + 14.0,
            ly
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">median AP</text>"#,
        TOP + PLOT_H / 2.0,
        TOP + PLOT_H / 2.0
    );
    s.push_str("</svg>\n");
    s
}

/// A finished run directory.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub rows: Vec<MetricsRow>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_run(dir: &Path) -> Result<RunRecord> {
    let config: ExperimentConfig = serde_json::from_str(&read_text(&dir.join(CONFIG_FILE))?)?;
    let status: RunStatus = serde_json::from_str(&read_text(&dir.join(STATUS_FILE))?)?;
    if status.state != RunState::Complete {
        return Err(Error::Format(format!(
            "run {} is {:?}, not complete{}",
            dir.display(),
            status.state,
            status.error.map(|e| format!(": {e}")).unwrap_or_default()
        )));
    }
    let mut rows = Vec::new();
    for arm in &status.arms {
        let path = dir.join(arm.name()).join(METRICS_FILE);
        if !path.is_file() {
            return Err(Error::Format(format!("missing metrics file {}", path.display())));
        }
        rows.extend(parse_metrics_csv(&read_text(&path)?)?);
    }
    Ok(RunRecord {
        dir: dir.to_path_buf(),
        config,
        rows,
    })
}

/// Identity of the generated benchmark a run used, ignoring the seed.
pub fn benchmark_fingerprint(cfg: &ExperimentConfig) -> Result<String> {
    let world = cfg.world_for(0);
    Ok(serde_json::to_string(&(&world, &cfg.benchmark))?)
}

/// Median table and chart of every arm found in `runs`, written to `out`.
/// Returns the path of `report.md`.
pub fn write_report(runs: &[PathBuf], out: &Path) -> Result<PathBuf> {
    if runs.is_empty() {
        return Err(Error::Config("no run directory given".into()));
    }
    let records = runs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    let first = benchmark_fingerprint(&records[0].config)?;
    for r in &records[1..] {
        if benchmark_fingerprint(&r.config)? != first {
            return Err(Error::Config(format!(
                "runs {} and {} use different benchmarks; refusing to aggregate them",
                records[0].dir.display(),
                r.dir.display()
            )));
        }
    }
    let rows: Vec<MetricsRow> = records.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    let summaries = summarize(&rows);
    create_dir(out)?;
    let mut md = String::from("# Open-world detection ablations\n\n");
    let _ = writeln!(md, "Runs: {}\n", runs.iter().map(|d| d.display().to_string()).collect::<Vec<_>>().join(", "));
    let mut arms: Vec<&str> = Vec::new();
    for s in &summaries {
        if !arms.contains(&s.arm.as_str()) {
            arms.push(&s.arm);
        }
    }
    for arm in arms {
        let group: Vec<VariantSummary> = summaries.iter().filter(|s| s.arm == arm).cloned().collect();
        let svg = format!("{arm}.svg");
        let path = out.join(&svg);
        fs::write(&path, bar_chart_svg(arm, &group)).map_err(|e| Error::io(&path, e))?;
        md.push_str(&summary_markdown(arm, &group));
        let _ = writeln!(md, "\n![{arm}]({svg})\n");
    }
    let medians: BTreeMap<String, BTreeMap<String, Option<f64>>> = summaries
        .iter()
        .map(|s| (format!("{}/{}", s.arm, s.variant), s.medians.clone()))
        .collect();
    write_json(&out.join("medians.json"), &medians)?;
    let path = out.join("report.md");
    fs::write(&path, md).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
