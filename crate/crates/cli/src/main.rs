use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hte_core::bench::{run_external, run_sweep, write_outputs, SweepConfig};
use hte_core::clustering::Clustering;
use hte_core::cvae::{codes_matrix, train, LatentCode, TrainConfig};
use hte_core::data::{fmt_real, load_matrix_csv, matrix_to_csv};
use hte_core::estimate::{estimate_all, EstimatorConfig};
use hte_core::graph::build_graph;
use hte_core::pipeline::{cluster_codes, downstream_codes, CodeMode, PipelineConfig};
use hte_core::simgen::{gen_dataset, SimConfig};
use hte_core::{load_csv, save_csv, RngState};

#[derive(Parser)]
#[command(name = "hte", version, about = "Robust heterogeneous treatment effect estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a censored observational dataset.
    Simulate(SimulateArgs),
    /// Train the graph attention + conditional VAE model and export latent codes.
    Fit(FitArgs),
    /// Cluster latent codes, promoting outliers to their own clusters.
    Cluster(ClusterArgs),
    /// Estimate clusterwise treatment effects.
    Estimate(EstimateArgs),
    /// Run the simulation benchmark sweep.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON file with a full or partial simulation config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    contamination: Option<f64>,
    #[arg(long)]
    noise_scale: Option<f64>,
    /// Exponential censoring rate; 0 disables censoring.
    #[arg(long)]
    censor_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 2)]
    latent_dim: usize,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    kl_weight: f64,
    #[arg(long, default_value_t = 16)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 8)]
    embed_dim: usize,
    #[arg(long, default_value_t = 0.3)]
    graph_threshold: f64,
    #[arg(long, default_value_t = 10)]
    max_degree: usize,
    /// Which encoder means to export.
    #[arg(long, value_enum, default_value = "treatment-marginal")]
    codes: CodesArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_codes: PathBuf,
    #[arg(long)]
    out_trace: Option<PathBuf>,
    /// Edge list of the confounder graph, one "i j corr" line per edge.
    #[arg(long)]
    out_graph: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum CodesArg {
    Observed,
    TreatmentMarginal,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    codes: PathBuf,
    /// Inlier cluster count, or `auto` to pick it by silhouette.
    #[arg(long, default_value = "auto")]
    k: String,
    #[arg(long, default_value_t = 3.0)]
    outlier_multiplier: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    codes: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    trim: f64,
    /// Huber threshold; `inf` disables clipping.
    #[arg(long, default_value_t = 1.345)]
    huber_c: f64,
    #[arg(long, default_value_t = 1.0)]
    ridge_lambda: f64,
    #[arg(long, default_value_t = 500)]
    bootstrap: usize,
    #[arg(long, default_value_t = 4)]
    min_per_arm: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON file mirroring the sweep config; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Score the configured methods on this CSV (needs a tau_true column)
    /// instead of running the simulation grid.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut cfg: SimConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SimConfig::default(),
    };
    if let Some(v) = args.n {
        cfg.n = v;
    }
    if let Some(v) = args.p {
        cfg.p = v;
    }
    if let Some(v) = args.rho {
        cfg.rho = v;
    }
    if let Some(v) = args.contamination {
        cfg.contamination_ratio = v;
    }
    if let Some(v) = args.noise_scale {
        cfg.noise_scale = v;
    }
    if let Some(v) = args.censor_rate {
        cfg.censor_rate = (v != 0.0).then_some(v);
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    let ds = gen_dataset(&cfg)?;
    save_csv(&ds, &args.out)?;
    log::info!(
        "wrote {} samples x {} covariates to {}",
        ds.n(),
        ds.p(),
        args.out.display()
    );
    Ok(())
}

fn fit(args: FitArgs) -> Result<()> {
    let ds = load_csv(&args.input)?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        kl_weight: args.kl_weight,
        latent_dim: args.latent_dim,
        hidden_dim: args.hidden_dim,
        embed_dim: args.embed_dim,
        ..TrainConfig::default()
    };
    let graph = build_graph(ds.x(), args.graph_threshold, args.max_degree)?;
    // same stream as the library pipeline
    let rng = RngState::new(args.seed).split("train");
    let out = train(&graph, ds.x(), ds.d(), &cfg, &rng)?;
    let mode = match args.codes {
        CodesArg::Observed => CodeMode::Observed,
        CodesArg::TreatmentMarginal => CodeMode::TreatmentMarginal,
    };
    let codes = codes_matrix(&downstream_codes(&out, &graph, ds.x(), mode)?);
    let header: Vec<String> = (1..=cfg.latent_dim).map(|k| format!("z{k}")).collect();
    fs::write(&args.out_codes, matrix_to_csv(&header, &codes))?;
    if let Some(path) = &args.out_trace {
        let mut text = String::from("epoch,loss,recon,kl\n");
        for (e, t) in out.trace.iter().enumerate() {
            let _ = writeln!(
                text,
                "{},{},{},{}",
                e + 1,
                fmt_real(t.loss),
                fmt_real(t.recon),
                fmt_real(t.kl)
            );
        }
        fs::write(path, text)?;
    }
    if let Some(path) = &args.out_graph {
        fs::write(path, graph.edge_list())?;
    }
    let (first, last) = (out.trace.first().map(|t| t.loss), out.trace.last().map(|t| t.loss));
    log::info!("trained {} epochs; loss {first:?} -> {last:?}", cfg.epochs);
    Ok(())
}

/// Latent codes as plain points (zero log-variance) for clustering.
fn as_latent(codes: &ndarray::Array2<f64>) -> Vec<LatentCode> {
    codes
        .rows()
        .into_iter()
        .map(|r| LatentCode {
            mu: r.to_vec(),
            logvar: vec![0.0; r.len()],
            z: r.to_vec(),
        })
        .collect()
}

fn cluster(args: ClusterArgs) -> Result<()> {
    let (_, codes) = load_matrix_csv(&args.codes)?;
    let k = match args.k.as_str() {
        "auto" => None,
        s => Some(
            s.parse::<usize>()
                .with_context(|| format!("--k must be `auto` or an integer, got `{s}`"))?,
        ),
    };
    let cfg = PipelineConfig {
        k,
        outlier_multiplier: args.outlier_multiplier,
        ..PipelineConfig::default()
    };
    let (clustering, outliers) = cluster_codes(&as_latent(&codes), &cfg, &RngState::new(args.seed))?;
    let mut text = String::from("index,label,is_outlier_cluster\n");
    for (i, &l) in clustering.labels.iter().enumerate() {
        let _ = writeln!(text, "{i},{l},{}", u8::from(clustering.is_outlier_cluster(l)));
    }
    fs::write(&args.out, text)?;
    log::info!("{} clusters, {} outliers", clustering.k(), outliers.len());
    Ok(())
}

fn read_labels(path: &Path, n: usize) -> Result<(Vec<usize>, BTreeSet<usize>)> {
    let (header, m) = load_matrix_csv(path)?;
    if header != ["index", "label", "is_outlier_cluster"] {
        bail!("{}: expected header index,label,is_outlier_cluster", path.display());
    }
    if m.nrows() != n {
        bail!("{}: {} labels for {n} samples", path.display(), m.nrows());
    }
    let mut labels = vec![usize::MAX; n];
    let mut outlier = BTreeSet::new();
    for row in m.rows() {
        let (i, l) = (row[0] as usize, row[1] as usize);
        if i >= n || labels[i] != usize::MAX {
            bail!("{}: bad or repeated index {i}", path.display());
        }
        labels[i] = l;
        if row[2] != 0.0 {
            outlier.insert(l);
        }
    }
    Ok((labels, outlier))
}

#[derive(Serialize)]
struct ClusterOut {
    id: usize,
    tau_hat: f64,
    se: f64,
    n: usize,
    n_treated: usize,
    n_control: usize,
    outlier: bool,
}

#[derive(Serialize)]
struct OverallOut {
    tau_hat: f64,
    se: f64,
}

#[derive(Serialize)]
struct EstimateOut {
    clusters: Vec<ClusterOut>,
    overall: OverallOut,
}

fn estimate(args: EstimateArgs) -> Result<()> {
    let ds = load_csv(&args.input)?;
    let (_, codes) = load_matrix_csv(&args.codes)?;
    if codes.nrows() != ds.n() {
        bail!("{} code rows for {} samples", codes.nrows(), ds.n());
    }
    let (labels, outlier) = read_labels(&args.labels, ds.n())?;
    let clustering = Clustering::from_labels(&codes, &labels, &outlier)?;
    let cfg = EstimatorConfig {
        trim: args.trim,
        huber_c: args.huber_c,
        ridge_lambda: args.ridge_lambda,
        bootstrap: args.bootstrap,
        min_per_arm: args.min_per_arm,
    };
    let rng = RngState::new(args.seed).split("estimate");
    let est = estimate_all(&codes, ds.y(), ds.d(), &clustering, &cfg, &rng)?;
    let out = EstimateOut {
        clusters: est
            .clusters
            .iter()
            .map(|c| ClusterOut {
                id: c.cluster,
                tau_hat: c.tau_hat,
                se: c.se_hat,
                n: c.n_k,
                n_treated: c.n_treated,
                n_control: c.n_control,
                outlier: c.is_outlier_cluster,
            })
            .collect(),
        overall: OverallOut {
            tau_hat: est.overall.tau_hat,
            se: est.overall.se,
        },
    };
    fs::write(&args.out, serde_json::to_string_pretty(&out)? + "\n")?;
    log::info!("overall effect {:.4} (se {:.4})", est.overall.tau_hat, est.overall.se);
    Ok(())
}

fn bench(args: BenchArgs) -> Result<bool> {
    let mut cfg: SweepConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SweepConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let report = match &args.data {
        Some(path) => run_external(&load_csv(path)?, &cfg.methods, &cfg.pipeline, cfg.seed)?,
        None => run_sweep(&cfg)?,
    };
    let manifest = write_outputs(&report, &args.out_dir)?;
    if manifest.invalid_cells > 0 {
        log::error!(
            "{} invalid cells (more than 10% failed replications)",
            manifest.invalid_cells
        );
    }
    Ok(manifest.invalid_cells == 0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a).map(|()| true),
        Command::Fit(a) => fit(a).map(|()| true),
        Command::Cluster(a) => cluster(a).map(|()| true),
        Command::Estimate(a) => estimate(a).map(|()| true),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
