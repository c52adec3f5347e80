//! Benchmark report structures and emission.
//!
//! The JSON form is fully deterministic for a given scenario list: struct
//! field order fixes the key order, and wall-clock timings are excluded
//! from it (they appear in the CSV form only). Failed scenarios keep their
//! row with a `failure` reason instead of metrics.

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use malloc_core::policy::ExecutionMode;
use malloc_core::resources::ResourceReport;

pub const SCHEMA_VERSION: &str = "malloc_bench_v1";

/// One (scenario, seed) outcome.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScenarioRow {
    /// `{policy_label}_blocks{n}_seed{s}`; unique within a report.
    pub id: String,
    pub policy: String,
    pub n_blocks: usize,
    pub seed: u64,
    pub auc: Option<f64>,
    pub gauc: Option<f64>,
    pub logloss: Option<f64>,
    pub resources: Option<ResourceReport>,
    /// Training reported a non-finite loss or parameters; recorded, never
    /// thrown.
    pub diverged: bool,
    pub failure: Option<String>,
    pub pareto: bool,
    /// Wall-clock seconds for the scenario; CSV only, excluded from JSON so
    /// reports are byte-identical across machines and worker counts.
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Per-(policy, depth) mean over the seeds that produced metrics.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MeanRow {
    pub id: String,
    pub policy: String,
    pub n_blocks: usize,
    pub seeds_aggregated: usize,
    pub auc: Option<f64>,
    pub gauc: Option<f64>,
    pub logloss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BenchReport {
    pub schema: String,
    pub rows: Vec<ScenarioRow>,
    pub means: Vec<MeanRow>,
}

/// Fixed CSV column order; also documented in the CLI help.
pub const CSV_COLUMNS: [&str; 17] = [
    "id",
    "policy",
    "n_blocks",
    "seed",
    "auc",
    "gauc",
    "logloss",
    "macs_measured",
    "macs_formula",
    "kv_peak_bytes",
    "overhead_bytes",
    "batch",
    "mode",
    "diverged",
    "pareto",
    "failure",
    "wall_seconds",
];

impl BenchReport {
    pub fn new(rows: Vec<ScenarioRow>, means: Vec<MeanRow>) -> Self {
        Self { schema: SCHEMA_VERSION.to_string(), rows, means }
    }

    pub fn to_json_string(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).context("serializing report")?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).context("parsing report JSON")
    }

    /// One header plus one line per (scenario, seed) row; mean rows are a
    /// JSON-only aggregate.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut out = Vec::new();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(CSV_COLUMNS)?;
            for row in &self.rows {
                let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
                let res = row.resources.as_ref();
                w.write_record([
                    row.id.clone(),
                    row.policy.clone(),
                    row.n_blocks.to_string(),
                    row.seed.to_string(),
                    opt(row.auc),
                    opt(row.gauc),
                    opt(row.logloss),
                    res.map(|r| r.macs_measured.to_string()).unwrap_or_default(),
                    res.and_then(|r| r.macs_formula).map(|v| v.to_string()).unwrap_or_default(),
                    res.map(|r| r.kv_peak_bytes.to_string()).unwrap_or_default(),
                    res.map(|r| r.overhead_bytes.to_string()).unwrap_or_default(),
                    res.map(|r| r.batch.to_string()).unwrap_or_default(),
                    res.map(|r| mode_name(r.mode).to_string()).unwrap_or_default(),
                    row.diverged.to_string(),
                    row.pareto.to_string(),
                    row.failure.clone().unwrap_or_default(),
                    format!("{:.3}", row.wall_seconds),
                ])?;
            }
            w.flush()?;
        }
        Ok(String::from_utf8(out).context("CSV is valid UTF-8")?)
    }

    pub fn write(&self, path: &Path, format: ReportFormat) -> Result<()> {
        let contents = match format {
            ReportFormat::Json => self.to_json_string()?,
            ReportFormat::Csv => self.to_csv_string()?,
        };
        let mut file = std::fs::File::create(path)
            .with_context(|| format!("creating {}", path.display()))?;
        file.write_all(contents.as_bytes())
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn mode_name(mode: ExecutionMode) -> &'static str {
    match mode {
        ExecutionMode::Cached => "cached",
        ExecutionMode::Recompute => "recompute",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
}
