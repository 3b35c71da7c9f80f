use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;

/// Mean and sample standard deviation (`n - 1`; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// One scalar outcome of one arm for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalValue {
    pub arm: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

/// Across-seed aggregate of one `(arm, metric)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arm: String,
    pub metric: String,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub protocol: String,
    pub rows: Vec<SummaryRow>,
    /// Protocol-level quantities computed from the row means.
    pub derived: BTreeMap<String, f64>,
}

impl Summary {
    /// Groups `finals` by `(arm, metric)`, ordering values by seed.
    pub fn from_finals(protocol: &str, finals: &[FinalValue]) -> Self {
        let mut groups: BTreeMap<(String, String), Vec<(u64, f64)>> = BTreeMap::new();
        for f in finals {
            groups
                .entry((f.arm.clone(), f.metric.clone()))
                .or_default()
                .push((f.seed, f.value));
        }
        let rows = groups
            .into_iter()
            .map(|((arm, metric), mut pairs)| {
                pairs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
                let values: Vec<f64> = pairs.iter().map(|p| p.1).collect();
                let (mean, std) = mean_std(&values);
                SummaryRow {
                    arm,
                    metric,
                    seeds: pairs.iter().map(|p| p.0).collect(),
                    values,
                    mean,
                    std,
                }
            })
            .collect();
        Summary {
            protocol: protocol.to_string(),
            rows,
            derived: BTreeMap::new(),
        }
    }

    pub fn row(&self, arm: &str, metric: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.arm == arm && r.metric == metric)
    }

    pub fn mean(&self, arm: &str, metric: &str) -> Option<f64> {
        self.row(arm, metric).map(|r| r.mean)
    }
}

/// Everything one protocol run produced.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub config: RunConfig,
    pub records: Vec<MetricsRecord>,
    pub finals: Vec<FinalValue>,
    pub summary: Summary,
    pub checkpoints: Vec<PathBuf>,
}

pub const SPEC_FILE: &str = "spec.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Stored form of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub summary: Summary,
    pub finals: Vec<FinalValue>,
    pub checkpoints: Vec<String>,
}

impl RunRecord {
    pub fn metrics_csv(&self) -> String {
        let layers = self.config.model.n_layers;
        let mut out = MetricsRecord::csv_header(layers);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn metrics_jsonl(&self) -> String {
        self.records.iter().map(|r| r.json_line() + "\n").collect()
    }

    pub fn summary_file(&self, root: &Path) -> SummaryFile {
        SummaryFile {
            summary: self.summary.clone(),
            finals: self.finals.clone(),
            checkpoints: self
                .checkpoints
                .iter()
                .map(|p| p.strip_prefix(root).unwrap_or(p).display().to_string())
                .collect(),
        }
    }

    /// Writes spec, metrics and summary into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(p, e))
        };
        put(SPEC_FILE, self.config.to_json() + "\n")?;
        put(METRICS_CSV, self.metrics_csv())?;
        put(METRICS_JSONL, self.metrics_jsonl())?;
        let summary = serde_json::to_string_pretty(&self.summary_file(dir))?;
        put(SUMMARY_FILE, summary + "\n")
    }
}

pub fn read_summary(dir: &Path) -> Result<(RunConfig, SummaryFile)> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(p, e))
    };
    let spec: RunConfig = serde_json::from_slice(&read(SPEC_FILE)?)?;
    let summary: SummaryFile = serde_json::from_slice(&read(SUMMARY_FILE)?)?;
    Ok((spec, summary))
}
