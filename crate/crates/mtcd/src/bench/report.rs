//! Benchmark result bundles and their serialized forms.
//!
//! CSV layout (fixed): sample rows are
//! `benchmark,param_set_id,sample_idx,value_ms` and aggregate rows are
//! `benchmark,param_set_id,metric,value`. Every file starts with a
//! machine-spec comment so results stay attributable to the box that
//! produced them. Emission is deterministic: re-emitting the same report
//! produces byte-identical files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

/// One named series of (x, y) points for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Metrics bundle for one benchmark run.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub benchmark: String,
    pub param_set_id: String,
    pub parameters: BTreeMap<String, String>,
    /// Per-op or per-task wall times, milliseconds.
    pub samples: Vec<f64>,
    pub derived: BTreeMap<String, f64>,
    pub series: Vec<Series>,
    pub machine: String,
    pub partial: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregates {
    pub count: usize,
    pub mean: f64,
    pub stddev: f64,
    pub min: f64,
    pub max: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

impl BenchReport {
    pub fn new(benchmark: impl Into<String>, param_set_id: impl Into<String>) -> Self {
        Self {
            benchmark: benchmark.into(),
            param_set_id: param_set_id.into(),
            parameters: BTreeMap::new(),
            samples: Vec::new(),
            derived: BTreeMap::new(),
            series: Vec::new(),
            machine: machine_spec(),
            partial: false,
        }
    }

    pub fn with_param(mut self, key: &str, value: impl ToString) -> Self {
        self.parameters.insert(key.into(), value.to_string());
        self
    }

    /// Aggregates are always recomputed from the stored samples.
    pub fn aggregates(&self) -> Aggregates {
        aggregate(&self.samples)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# machine: {}\n", self.machine));
        out.push_str(&format!("# benchmark: {}", self.benchmark));
        for (k, v) in &self.parameters {
            out.push_str(&format!(" {k}={v}"));
        }
        if self.partial {
            out.push_str(" PARTIAL");
        }
        out.push('\n');
        out.push_str("benchmark,param_set_id,sample_idx,value_ms\n");
        for (i, v) in self.samples.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", self.benchmark, self.param_set_id, i, fmt(*v)));
        }
        out.push_str("benchmark,param_set_id,metric,value\n");
        let agg = self.aggregates();
        let rows: Vec<(&str, f64)> = vec![
            ("count", agg.count as f64),
            ("mean_ms", agg.mean),
            ("stddev_ms", agg.stddev),
            ("min_ms", agg.min),
            ("max_ms", agg.max),
            ("p50_ms", agg.p50),
            ("p90_ms", agg.p90),
            ("p99_ms", agg.p99),
        ];
        for (metric, value) in rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.benchmark,
                self.param_set_id,
                metric,
                fmt(value)
            ));
        }
        for (metric, value) in &self.derived {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.benchmark,
                self.param_set_id,
                metric,
                fmt(*value)
            ));
        }
        out
    }
}

fn fmt(v: f64) -> String {
    // Shortest round-trippable form keeps files diffable.
    format!("{v}")
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (p / 100.0 * (sorted.len() as f64 - 1.0)).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

pub(crate) fn aggregate(samples: &[f64]) -> Aggregates {
    if samples.is_empty() {
        return Aggregates {
            count: 0,
            mean: 0.0,
            stddev: 0.0,
            min: 0.0,
            max: 0.0,
            p50: 0.0,
            p90: 0.0,
            p99: 0.0,
        };
    }
    let count = samples.len();
    let mean = samples.iter().sum::<f64>() / count as f64;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN samples"));
    Aggregates {
        count,
        mean,
        stddev: var.sqrt(),
        min: sorted[0],
        max: sorted[count - 1],
        p50: percentile(&sorted, 50.0),
        p90: percentile(&sorted, 90.0),
        p99: percentile(&sorted, 99.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    PlotData,
}

/// Write the report under `out_dir`; returns the paths written.
pub fn emit_report(
    report: &BenchReport,
    format: ReportFormat,
    out_dir: &Path,
) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    match format {
        ReportFormat::Csv => {
            let path = out_dir.join(format!("{}_{}.csv", report.benchmark, report.param_set_id));
            std::fs::write(&path, report.to_csv())?;
            written.push(path);
        }
        ReportFormat::PlotData => {
            for series in &report.series {
                let path = out_dir.join(format!(
                    "{}_{}__{}.dat",
                    report.benchmark, report.param_set_id, series.label
                ));
                let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
                writeln!(f, "# machine: {}", report.machine)?;
                writeln!(f, "# series: {} ({})", series.label, report.benchmark)?;
                for (x, y) in &series.points {
                    writeln!(f, "{} {}", fmt(*x), fmt(*y))?;
                }
                f.flush()?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

/// Host fingerprint recorded in every report.
pub fn machine_spec() -> String {
    let cpus = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(0);
    format!(
        "{}-{} cpus={}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        cpus
    )
}
