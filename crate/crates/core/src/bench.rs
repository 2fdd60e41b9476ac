//! Replication harness: contamination x sample-size sweeps scored by bias,
//! MSE and MAE of per-sample effect estimates against the simulated truth.

use std::fmt::Write as _;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::pipeline::{run_comparator, run_pipeline, Comparator, PipelineConfig};
use crate::rng::RngState;
use crate::simgen::{gen_dataset, SimConfig};

/// A cell is invalid when more than this fraction of replications failed.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Proposed,
    PlainAipw,
    Ipw,
    Or,
    /// Returns the true effects; for testing the harness.
    Oracle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::PlainAipw => "plain_aipw",
            Method::Ipw => "ipw",
            Method::Or => "or",
            Method::Oracle => "oracle",
        }
    }

    /// Display label used in tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::Proposed => "Proposed",
            Method::PlainAipw => "Plain AIPW",
            Method::Ipw => "IPW",
            Method::Or => "Outcome regression",
            Method::Oracle => "Oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub n_grid: Vec<usize>,
    pub contamination_grid: Vec<f64>,
    pub replications: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    /// Simulation template; `n`, `contamination_ratio` and `seed` are set per replication.
    pub sim: SimConfig,
    pub pipeline: PipelineConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n_grid: vec![20, 40, 60, 80, 100],
            contamination_grid: vec![0.0, 0.1, 0.2],
            replications: 200,
            methods: vec![Method::Proposed, Method::PlainAipw, Method::Ipw, Method::Or],
            seed: 0,
            sim: SimConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Domain("replications must be >= 1".into()));
        }
        if self.n_grid.is_empty() || self.contamination_grid.is_empty() || self.methods.is_empty() {
            return Err(Error::Domain(
                "n grid, contamination grid and methods must be non-empty".into(),
            ));
        }
        for &r in &self.contamination_grid {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Domain(format!("contamination ratio {r} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    fn sorted_methods(&self) -> Vec<Method> {
        let mut m = self.methods.clone();
        m.sort();
        m.dedup();
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub bias: f64,
    pub mse: f64,
    pub mae: f64,
}

/// Bias, MSE and MAE of `tau_hat` against `tau_true`.
pub fn metrics(tau_hat: &[f64], tau_true: &[f64]) -> Result<Metrics> {
    if tau_hat.len() != tau_true.len() {
        return Err(Error::shape("tau_hat", tau_true.len(), tau_hat.len()));
    }
    if tau_hat.is_empty() {
        return Err(Error::Domain("metrics need at least one sample".into()));
    }
    let n = tau_hat.len() as f64;
    let (mut bias, mut mse, mut mae) = (0.0, 0.0, 0.0);
    for (h, t) in tau_hat.iter().zip(tau_true) {
        let e = h - t;
        bias += e;
        mse += e * e;
        mae += e.abs();
    }
    Ok(Metrics {
        bias: bias / n,
        mse: mse / n,
        mae: mae / n,
    })
}

/// Outcome of one method on one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRecord {
    pub ratio: Option<f64>,
    pub n: usize,
    pub replication: usize,
    pub method: Method,
    pub outcome: std::result::Result<Metrics, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    /// `None` for external data.
    pub ratio: Option<f64>,
    pub n: usize,
    pub method: Method,
    pub replications: usize,
    pub failures: usize,
    pub valid: bool,
    pub bias: f64,
    pub abs_bias: f64,
    pub mse: f64,
    pub mae: f64,
    pub bias_se: f64,
    pub mse_se: f64,
    pub mae_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub metadata: ReportMetadata,
    /// Sorted by `(ratio, n, method)`.
    pub cells: Vec<CellSummary>,
    #[serde(skip)]
    pub records: Vec<ReplicationRecord>,
}

impl BenchReport {
    pub fn any_invalid(&self) -> bool {
        self.cells.iter().any(|c| !c.valid)
    }

    pub fn cell(&self, ratio: Option<f64>, n: usize, method: Method) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.ratio == ratio && c.n == n && c.method == method)
    }

    /// Per-replication MSE of `method` in a cell, `None` for failed replications.
    pub fn replicate_mse(&self, ratio: Option<f64>, n: usize, method: Method) -> Vec<Option<f64>> {
        let mut recs: Vec<&ReplicationRecord> = self
            .records
            .iter()
            .filter(|r| r.ratio == ratio && r.n == n && r.method == method)
            .collect();
        recs.sort_by_key(|r| r.replication);
        recs.iter().map(|r| r.outcome.as_ref().ok().map(|m| m.mse)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Mean and standard error of the mean.
fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

fn summarize(ratio: Option<f64>, n: usize, method: Method, recs: &[&ReplicationRecord]) -> CellSummary {
    let ok: Vec<Metrics> = recs.iter().filter_map(|r| r.outcome.as_ref().ok().copied()).collect();
    let failures = recs.len() - ok.len();
    let (bias, bias_se) = mean_se(&ok.iter().map(|m| m.bias).collect::<Vec<_>>());
    let (mse, mse_se) = mean_se(&ok.iter().map(|m| m.mse).collect::<Vec<_>>());
    let (mae, mae_se) = mean_se(&ok.iter().map(|m| m.mae).collect::<Vec<_>>());
    CellSummary {
        ratio,
        n,
        method,
        replications: recs.len(),
        failures,
        valid: !ok.is_empty() && failures as f64 <= MAX_FAILURE_FRACTION * recs.len() as f64,
        bias,
        abs_bias: bias.abs(),
        mse,
        mae,
        bias_se,
        mse_se,
        mae_se,
    }
}

/// Per-sample effect estimates of `method` on `ds`.
pub fn estimate_per_sample(
    method: Method,
    ds: &Dataset,
    pipeline: &PipelineConfig,
    rng: &RngState,
) -> Result<Vec<f64>> {
    match method {
        Method::Proposed => Ok(run_pipeline(ds, pipeline, rng)?.estimates.per_sample),
        Method::PlainAipw => run_comparator(Comparator::PlainAipw, ds, &pipeline.estimator, rng),
        Method::Ipw => run_comparator(Comparator::Ipw, ds, &pipeline.estimator, rng),
        Method::Or => run_comparator(Comparator::Or, ds, &pipeline.estimator, rng),
        Method::Oracle => ds
            .truth()
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::Domain("oracle method needs true effects".into())),
    }
}

fn score(
    method: Method,
    ds: &Dataset,
    pipeline: &PipelineConfig,
    rng: &RngState,
) -> std::result::Result<Metrics, String> {
    let truth = ds.truth().ok_or("dataset has no true effects")?;
    let est = estimate_per_sample(method, ds, pipeline, rng).map_err(|e| e.to_string())?;
    metrics(&est, truth).map_err(|e| e.to_string())
}

fn assemble(cfg_seed: u64, config_hash: String, methods: &[Method], records: Vec<ReplicationRecord>) -> BenchReport {
    let mut keys: Vec<(Option<f64>, usize)> = Vec::new();
    for r in &records {
        if !keys.contains(&(r.ratio, r.n)) {
            keys.push((r.ratio, r.n));
        }
    }
    keys.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite ratios").then(a.1.cmp(&b.1)));
    let mut cells = Vec::new();
    for (ratio, n) in keys {
        for &m in methods {
            let recs: Vec<&ReplicationRecord> = records
                .iter()
                .filter(|r| r.ratio == ratio && r.n == n && r.method == m)
                .collect();
            let cell = summarize(ratio, n, m, &recs);
            log::info!(
                "cell ratio={ratio:?} n={n} method={}: mse {:.4} ({} failures)",
                m.name(),
                cell.mse,
                cell.failures
            );
            cells.push(cell);
        }
    }
    BenchReport {
        metadata: ReportMetadata {
            seed: cfg_seed,
            config_hash,
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
        cells,
        records,
    }
}

fn replication_rng(root: &RngState, ratio: f64, n: usize, rep: usize) -> RngState {
    root.split(&format!("cell/{ratio}/{n}/rep/{rep}"))
}

/// Runs every method on every replication of every grid cell. Each
/// replication draws one dataset shared by all methods. Output does not
/// depend on thread scheduling.
pub fn run_sweep(cfg: &SweepConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let methods = cfg.sorted_methods();
    let root = RngState::new(cfg.seed);
    let mut tasks = Vec::new();
    for &ratio in &cfg.contamination_grid {
        for &n in &cfg.n_grid {
            for rep in 0..cfg.replications {
                tasks.push((ratio, n, rep));
            }
        }
    }
    let records: Vec<Vec<ReplicationRecord>> = tasks
        .par_iter()
        .map(|&(ratio, n, rep)| {
            let rng = replication_rng(&root, ratio, n, rep);
            let sim = SimConfig {
                n,
                contamination_ratio: ratio,
                seed: rng.split("data").rng().next_u64(),
                ..cfg.sim.clone()
            };
            let ds = gen_dataset(&sim);
            methods
                .iter()
                .map(|&method| {
                    let outcome = match &ds {
                        Ok(ds) => score(method, ds, &cfg.pipeline, &rng.split(method.name())),
                        Err(e) => Err(e.to_string()),
                    };
                    if let Err(e) = &outcome {
                        log::debug!("ratio={ratio} n={n} rep={rep} {}: {e}", method.name());
                    }
                    ReplicationRecord {
                        ratio: Some(ratio),
                        n,
                        replication: rep,
                        method,
                        outcome,
                    }
                })
                .collect()
        })
        .collect();
    Ok(assemble(
        cfg.seed,
        cfg.hash(),
        &methods,
        records.into_iter().flatten().collect(),
    ))
}

/// Scores methods on an externally supplied dataset with a truth column.
/// The single cell has no contamination ratio.
pub fn run_external(ds: &Dataset, methods: &[Method], pipeline: &PipelineConfig, seed: u64) -> Result<BenchReport> {
    if ds.truth().is_none() {
        return Err(Error::Domain(
            "external data needs a tau_true column to be scored".into(),
        ));
    }
    let mut methods = methods.to_vec();
    methods.sort();
    methods.dedup();
    let root = RngState::new(seed);
    let records = methods
        .iter()
        .map(|&method| ReplicationRecord {
            ratio: None,
            n: ds.n(),
            replication: 0,
            method,
            outcome: score(method, ds, pipeline, &root.split(method.name())),
        })
        .collect();
    let hash_input = serde_json::to_vec(&(&methods, pipeline, seed))?;
    Ok(assemble(
        seed,
        hex::encode(Sha256::digest(&hash_input)),
        &methods,
        records,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Csv,
}

fn ratio_label(r: Option<f64>) -> String {
    r.map_or_else(|| "external".to_string(), |r| format!("{r}"))
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.4}")
}

/// One table per contamination ratio with rows grouped by sample size and
/// the proposed method first. Bias is shown as `|bias|`.
pub fn render_tables(report: &BenchReport, format: TableFormat) -> String {
    let mut ratios: Vec<Option<f64>> = Vec::new();
    for c in &report.cells {
        if !ratios.contains(&c.ratio) {
            ratios.push(c.ratio);
        }
    }
    let mut out = String::new();
    if format == TableFormat::Csv {
        out.push_str("ratio,n,method,bias,mse,mae,failures,valid\n");
    }
    for (t, ratio) in ratios.iter().enumerate() {
        let cells: Vec<&CellSummary> = report.cells.iter().filter(|c| c.ratio == *ratio).collect();
        if format == TableFormat::Markdown {
            if t > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "### Contamination ratio {}\n", ratio_label(*ratio));
            out.push_str("| Sample Size | Method | Bias | MSE | MAE |\n");
            out.push_str("|---|---|---|---|---|\n");
        }
        for c in cells {
            match format {
                TableFormat::Markdown => {
                    let flag = if c.valid { "" } else { " (invalid)" };
                    let _ = writeln!(
                        out,
                        "| {} | {}{} | {} | {} | {} |",
                        c.n,
                        c.method.label(),
                        flag,
                        fmt_metric(c.abs_bias),
                        fmt_metric(c.mse),
                        fmt_metric(c.mae)
                    );
                }
                TableFormat::Csv => {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},{},{}",
                        ratio_label(*ratio),
                        c.n,
                        c.method.name(),
                        fmt_metric(c.abs_bias),
                        fmt_metric(c.mse),
                        fmt_metric(c.mae),
                        c.failures,
                        c.valid
                    );
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub crate_version: String,
    pub report_format: u32,
    /// Seconds since the Unix epoch when the files were written.
    pub written_at_unix: u64,
    pub files: Vec<String>,
    pub invalid_cells: usize,
}

pub const REPORT_FILES: [&str; 3] = ["report.json", "tables.md", "tables.csv"];

/// Writes `report.json`, `tables.md`, `tables.csv` and `manifest.json` into
/// `dir`. Only the manifest carries a timestamp, so the other files are
/// byte-identical across runs with equal configuration.
pub fn write_outputs(report: &BenchReport, dir: &std::path::Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), report.to_json()?)?;
    std::fs::write(dir.join("tables.md"), render_tables(report, TableFormat::Markdown))?;
    std::fs::write(dir.join("tables.csv"), render_tables(report, TableFormat::Csv))?;
    let manifest = Manifest {
        config_hash: report.metadata.config_hash.clone(),
        seed: report.metadata.seed,
        crate_version: report.metadata.version.clone(),
        report_format: 1,
        written_at_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        files: REPORT_FILES.iter().map(|s| s.to_string()).collect(),
        invalid_cells: report.cells.iter().filter(|c| !c.valid).count(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_perfect_estimate() {
        let m = metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((m.bias, m.mse, m.mae), (0.0, 0.0, 0.0));
    }

    #[test]
    fn metrics_constant_shift() {
        let m = metrics(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((m.bias, m.mse, m.mae), (1.0, 1.0, 1.0));
    }

    #[test]
    fn metrics_hand_arithmetic() {
        let m = metrics(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!((m.bias, m.mse, m.mae), (0.0, 1.0, 1.0));
    }

    #[test]
    fn metrics_length_mismatch() {
        assert!(matches!(metrics(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
        assert!(metrics(&[], &[]).is_err());
    }

    #[test]
    fn methods_sort_proposed_first() {
        let cfg = SweepConfig {
            methods: vec![Method::Or, Method::Ipw, Method::Proposed, Method::Or],
            ..SweepConfig::default()
        };
        assert_eq!(cfg.sorted_methods(), vec![Method::Proposed, Method::Ipw, Method::Or]);
    }

    #[test]
    fn failure_threshold() {
        let rec = |ok: bool, r| ReplicationRecord {
            ratio: Some(0.0),
            n: 10,
            replication: r,
            method: Method::Ipw,
            outcome: if ok {
                Ok(Metrics {
                    bias: 0.0,
                    mse: 1.0,
                    mae: 1.0,
                })
            } else {
                Err("x".into())
            },
        };
        let recs: Vec<ReplicationRecord> = (0..10).map(|r| rec(r != 0, r)).collect();
        let refs: Vec<&ReplicationRecord> = recs.iter().collect();
        assert!(summarize(Some(0.0), 10, Method::Ipw, &refs).valid);
        let recs: Vec<ReplicationRecord> = (0..10).map(|r| rec(r > 1, r)).collect();
        let refs: Vec<&ReplicationRecord> = recs.iter().collect();
        let s = summarize(Some(0.0), 10, Method::Ipw, &refs);
        assert!(!s.valid);
        assert_eq!(s.failures, 2);
    }

    #[test]
    fn config_validation() {
        assert!(SweepConfig {
            replications: 0,
            ..SweepConfig::default()
        }
        .validate()
        .is_err());
        assert!(SweepConfig {
            n_grid: vec![],
            ..SweepConfig::default()
        }
        .validate()
        .is_err());
        assert!(SweepConfig {
            contamination_grid: vec![1.0],
            ..SweepConfig::default()
        }
        .validate()
        .is_err());
    }
}
