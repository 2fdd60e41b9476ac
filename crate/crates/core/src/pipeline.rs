//! End-to-end assembly of the proposed method and the comparator estimators.

use std::collections::BTreeSet;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::clustering::{cluster_with_known_outliers, default_k_range, detect_outliers, select_k, Clustering};
use crate::cvae::{augment_codes, codes_matrix, train, treatment_marginal_codes, LatentCode, TrainConfig, TrainOutput};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimate::{
    estimate_all, tau_ipw, tau_or, tau_plain_aipw, EffectEstimates, EstimatorConfig, DEFAULT_HUBER_C,
};
use crate::graph::{build_graph, ConfounderGraph};
use crate::rng::RngState;

/// Which encoder means feed clustering and estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeMode {
    /// Means under each sample's observed treatment.
    Observed,
    /// Means averaged over `t = 0` and `t = 1`.
    TreatmentMarginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub code_mode: CodeMode,
    pub graph_threshold: f64,
    pub max_degree: usize,
    pub train: TrainConfig,
    pub outlier_multiplier: f64,
    /// Fixed inlier cluster count; `None` selects it by silhouette.
    pub k: Option<usize>,
    pub k_max: usize,
    /// Extra posterior draws per sample added to the clustering input.
    pub augment: usize,
    pub estimator: EstimatorConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            code_mode: CodeMode::TreatmentMarginal,
            graph_threshold: 0.3,
            max_degree: 10,
            train: TrainConfig::default(),
            outlier_multiplier: crate::clustering::DEFAULT_OUTLIER_MULTIPLIER,
            k: None,
            k_max: 6,
            augment: 0,
            estimator: EstimatorConfig {
                huber_c: DEFAULT_HUBER_C,
                ..EstimatorConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub graph: ConfounderGraph,
    pub training: TrainOutput,
    /// Latent codes used for clustering and estimation (`n x l`).
    pub codes: Array2<f64>,
    pub outliers: Vec<usize>,
    /// Clustering before small clusters were merged.
    pub clustering: Clustering,
    pub estimates: EffectEstimates,
}

/// Detects outliers, picks `k` (unless fixed) and clusters. With `augment > 0`
/// extra posterior draws join the clustering input and each sample keeps the
/// label of its own code.
pub fn cluster_codes(codes: &[LatentCode], cfg: &PipelineConfig, rng: &RngState) -> Result<(Clustering, Vec<usize>)> {
    let n = codes.len();
    let base = codes_matrix(codes);
    let input = if cfg.augment > 0 {
        let (extra, _) = augment_codes(codes, cfg.augment, &rng.split("augment"));
        concatenate(Axis(0), &[base.view(), extra.view()]).map_err(|e| Error::Shape(e.to_string()))?
    } else {
        base.clone()
    };
    let outliers = detect_outliers(&input, cfg.outlier_multiplier)?;
    let is_out: BTreeSet<usize> = outliers.iter().copied().collect();
    let k = match cfg.k {
        Some(k) => k,
        None => {
            let inliers: Vec<usize> = (0..input.nrows()).filter(|i| !is_out.contains(i)).collect();
            match default_k_range(inliers.len()) {
                Some(range) => {
                    let hi = (*range.end()).min(cfg.k_max.max(2));
                    select_k(&input.select(Axis(0), &inliers), 2..=hi, &rng.split("select_k"))?
                }
                None => 1,
            }
        }
    };
    let full = cluster_with_known_outliers(&input, k, &outliers, &rng.split("cluster"))?;
    let sample_outliers: Vec<usize> = outliers.into_iter().filter(|&i| i < n).collect();
    if input.nrows() == n {
        return Ok((full, sample_outliers));
    }
    let clustering = Clustering::from_labels(&base, &full.labels[..n], &full.outlier_clusters)?;
    Ok((clustering, sample_outliers))
}

/// The codes used downstream under `mode`.
pub fn downstream_codes(
    training: &TrainOutput,
    graph: &ConfounderGraph,
    x: &Array2<f64>,
    mode: CodeMode,
) -> Result<Vec<LatentCode>> {
    match mode {
        CodeMode::Observed => Ok(training.codes.clone()),
        CodeMode::TreatmentMarginal => {
            let mu = treatment_marginal_codes(&training.model, graph, x)?;
            Ok(training
                .codes
                .iter()
                .zip(mu.rows())
                .map(|(c, m)| LatentCode {
                    mu: m.to_vec(),
                    z: m.to_vec(),
                    logvar: c.logvar.clone(),
                })
                .collect())
        }
    }
}

/// Runs the proposed method: graph, joint training, outlier-aware clustering
/// and clusterwise doubly robust estimation on the latent codes.
pub fn run_pipeline(ds: &Dataset, cfg: &PipelineConfig, rng: &RngState) -> Result<PipelineOutput> {
    let graph = build_graph(ds.x(), cfg.graph_threshold, cfg.max_degree)?;
    let training = train(&graph, ds.x(), ds.d(), &cfg.train, &rng.split("train"))?;
    let latent = downstream_codes(&training, &graph, ds.x(), cfg.code_mode)?;
    let codes = codes_matrix(&latent);
    let (clustering, outliers) = cluster_codes(&latent, cfg, rng)?;
    let estimates = estimate_all(
        &codes,
        ds.y(),
        ds.d(),
        &clustering,
        &cfg.estimator,
        &rng.split("estimate"),
    )?;
    Ok(PipelineOutput {
        graph,
        training,
        codes,
        outliers,
        clustering,
        estimates,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    PlainAipw,
    Ipw,
    Or,
}

/// Whole-sample comparator estimate on the observed covariates, returned as a
/// per-sample vector (every entry equal).
pub fn run_comparator(which: Comparator, ds: &Dataset, cfg: &EstimatorConfig, rng: &RngState) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..ds.n()).collect();
    let eff = match which {
        Comparator::PlainAipw => tau_plain_aipw(ds.x(), ds.y(), ds.d(), cfg, &idx, rng)?,
        Comparator::Ipw => tau_ipw(ds.x(), ds.y(), ds.d(), cfg, &idx, rng)?,
        Comparator::Or => tau_or(ds.x(), ds.y(), ds.d(), cfg, &idx, rng)?,
    };
    Ok(vec![eff.tau_hat; ds.n()])
}
