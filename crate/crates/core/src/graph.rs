//! Confounder graph and a single-head graph attention layer with an exact
//! reverse-mode gradient.
//!
//! Nodes are covariates. Each node carries its row of the empirical
//! correlation matrix as features, and edges join strongly correlated
//! covariates. The attention layer computes
//!
//! ```text
//! e_ij  = LeakyReLU(a_src . W h_i + a_dst . W h_j)      j in N(i)
//! alpha = softmax_j(e_ij)
//! h'_i  = act(sum_j alpha_ij W h_j)
//! ```

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfounderGraph {
    /// Sorted neighbor lists; every node lists itself.
    neighbors: Vec<Vec<usize>>,
    /// `|corr|` per neighbor entry, parallel to `neighbors` (1 for self-loops).
    weights: Vec<Vec<f64>>,
    node_features: Array2<f64>,
}

impl ConfounderGraph {
    /// Builds a graph from explicit undirected edges. Self-loops are added and
    /// the edge set is symmetrized.
    pub fn from_edges(node_features: Array2<f64>, edges: &[(usize, usize)]) -> Result<Self> {
        let p = node_features.nrows();
        let mut neighbors: Vec<Vec<usize>> = (0..p).map(|i| vec![i]).collect();
        for &(i, j) in edges {
            if i >= p || j >= p {
                return Err(Error::Domain(format!("edge ({i}, {j}) out of range for {p} nodes")));
            }
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        let weights = neighbors.iter().map(|l| vec![1.0; l.len()]).collect();
        Ok(Self {
            neighbors,
            weights,
            node_features,
        })
    }

    pub fn p(&self) -> usize {
        self.neighbors.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.ncols()
    }

    pub fn node_features(&self) -> &Array2<f64> {
        &self.node_features
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors
            .iter()
            .enumerate()
            .map(|(i, l)| l.iter().filter(|&&j| j >= i).count())
            .sum()
    }

    /// One `i j corr` line per undirected edge (1-based node ids).
    pub fn edge_list(&self) -> String {
        let mut out = String::new();
        for (i, (list, w)) in self.neighbors.iter().zip(&self.weights).enumerate() {
            for (&j, &c) in list.iter().zip(w) {
                if j >= i {
                    writeln!(out, "{} {} {}", i + 1, j + 1, c).unwrap();
                }
            }
        }
        out
    }
}

/// Pearson correlation matrix of the columns of `x`. Columns without variance
/// get zero correlation with everything else.
pub fn correlation_matrix(x: &Array2<f64>) -> (Array2<f64>, Vec<usize>) {
    let (n, p) = x.dim();
    let means = x.mean_axis(Axis(0)).expect("n > 0");
    let mut z = x - &means;
    let mut constant = Vec::new();
    for (j, mut col) in z.columns_mut().into_iter().enumerate() {
        let ss: f64 = col.iter().map(|v| v * v).sum();
        if ss <= f64::EPSILON * n as f64 {
            constant.push(j);
            col.fill(0.0);
        } else {
            col /= ss.sqrt();
        }
    }
    let mut c = z.t().dot(&z);
    for j in 0..p {
        c[[j, j]] = 1.0;
    }
    (c, constant)
}

/// Correlation-threshold graph over the columns of `x`.
pub fn build_graph(x: &Array2<f64>, threshold: f64, max_degree: usize) -> Result<ConfounderGraph> {
    let n = x.nrows();
    if n < 3 {
        return Err(Error::Domain(format!(
            "need at least 3 samples to build a graph, got {n}"
        )));
    }
    if max_degree == 0 {
        return Err(Error::Domain("max_degree must be positive".into()));
    }
    let (corr, constant) = correlation_matrix(x);
    for j in &constant {
        log::warn!("covariate x{} has zero variance; treated as an isolated node", j + 1);
    }
    let p = corr.nrows();
    let mut chosen: Vec<Vec<usize>> = vec![Vec::new(); p];
    for i in 0..p {
        let mut cand: Vec<(usize, f64)> = (0..p)
            .filter(|&j| j != i)
            .map(|j| (j, corr[[i, j]].abs()))
            .filter(|&(_, c)| c >= threshold)
            .collect();
        cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cand.truncate(max_degree);
        chosen[i] = cand.into_iter().map(|(j, _)| j).collect();
    }
    let edges: Vec<(usize, usize)> = chosen
        .iter()
        .enumerate()
        .flat_map(|(i, l)| l.iter().map(move |&j| (i, j)))
        .collect();
    let mut g = ConfounderGraph::from_edges(corr.clone(), &edges)?;
    g.weights = g
        .neighbors
        .iter()
        .enumerate()
        .map(|(i, l)| l.iter().map(|&j| corr[[i, j]].abs()).collect())
        .collect();
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Elu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatLayer {
    /// `out_dim x in_dim`.
    pub w: Array2<f64>,
    /// Source half then destination half, each `out_dim` long.
    pub a: Vec<f64>,
    pub leaky_slope: f64,
    pub activation: Activation,
}

impl GatLayer {
    /// Glorot-uniform weights.
    pub fn init(in_dim: usize, out_dim: usize, rng: &RngState) -> Self {
        let mut r = rng.rng();
        let bw = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| r.random_range(-bw..bw));
        let ba = (6.0 / (2 * out_dim + 1) as f64).sqrt();
        let a = (0..2 * out_dim).map(|_| r.random_range(-ba..ba)).collect();
        Self {
            w,
            a,
            leaky_slope: 0.2,
            activation: Activation::Elu,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    fn check(&self, g: &ConfounderGraph) -> Result<()> {
        if self.a.len() != 2 * self.out_dim() {
            return Err(Error::shape(
                "attention vector length",
                2 * self.out_dim(),
                self.a.len(),
            ));
        }
        if self.in_dim() != g.feature_dim() {
            return Err(Error::shape(
                "layer input dim vs node feature dim",
                g.feature_dim(),
                self.in_dim(),
            ));
        }
        if self.out_dim() == 0 {
            return Err(Error::Shape("layer output dim must be >= 1".into()));
        }
        Ok(())
    }

    fn leaky(&self, x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            self.leaky_slope * x
        }
    }

    fn leaky_grad(&self, x: f64) -> f64 {
        if x > 0.0 {
            1.0
        } else {
            self.leaky_slope
        }
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GatForward {
    /// Projected features `W h_j`, one row per node.
    pub projected: Array2<f64>,
    /// Pre-LeakyReLU attention logits per neighbor entry.
    pub raw_logits: Vec<Vec<f64>>,
    /// Attention weights per neighbor entry.
    pub alpha: Vec<Vec<f64>>,
    pub pre_activation: Array2<f64>,
    pub output: Array2<f64>,
}

pub fn gat_forward_cached(g: &ConfounderGraph, layer: &GatLayer) -> Result<GatForward> {
    layer.check(g)?;
    let f_out = layer.out_dim();
    let projected = g.node_features.dot(&layer.w.t());
    let (a_src, a_dst) = layer.a.split_at(f_out);
    let src: Vec<f64> = projected
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(a_src).map(|(u, v)| u * v).sum())
        .collect();
    let dst: Vec<f64> = projected
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(a_dst).map(|(u, v)| u * v).sum())
        .collect();

    let p = g.p();
    let mut raw_logits = Vec::with_capacity(p);
    let mut alpha = Vec::with_capacity(p);
    let mut pre = Array2::zeros((p, f_out));
    for i in 0..p {
        let nb = &g.neighbors[i];
        let raw: Vec<f64> = nb.iter().map(|&j| src[i] + dst[j]).collect();
        let logits: Vec<f64> = raw.iter().map(|&s| layer.leaky(s)).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&e| (e - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let att: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let mut row = pre.row_mut(i);
        for (&j, &w) in nb.iter().zip(&att) {
            row.scaled_add(w, &projected.row(j));
        }
        raw_logits.push(raw);
        alpha.push(att);
    }
    let output = pre.mapv(|v| layer.activation.apply(v));
    Ok(GatForward {
        projected,
        raw_logits,
        alpha,
        pre_activation: pre,
        output,
    })
}

/// Node embeddings `H'` (`p x out_dim`).
pub fn gat_forward(g: &ConfounderGraph, layer: &GatLayer) -> Result<Array2<f64>> {
    gat_forward_cached(g, layer).map(|c| c.output)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatGrads {
    pub w: Array2<f64>,
    pub a: Vec<f64>,
}

/// Gradient of `<upstream, H'>` with respect to `W` and `a`.
pub fn gat_grad(g: &ConfounderGraph, layer: &GatLayer, upstream: &Array2<f64>) -> Result<GatGrads> {
    let fwd = gat_forward_cached(g, layer)?;
    gat_backward(g, layer, &fwd, upstream.view())
}

pub fn gat_backward(
    g: &ConfounderGraph,
    layer: &GatLayer,
    fwd: &GatForward,
    upstream: ArrayView2<f64>,
) -> Result<GatGrads> {
    let f_out = layer.out_dim();
    if upstream.dim() != fwd.output.dim() {
        return Err(Error::shape(
            "upstream gradient",
            format!("{:?}", fwd.output.dim()),
            format!("{:?}", upstream.dim()),
        ));
    }
    let p = g.p();
    let (a_src, a_dst) = layer.a.split_at(f_out);
    let mut d_pre = Array2::zeros((p, f_out));
    for ((dp, &up), (&x, &y)) in d_pre
        .iter_mut()
        .zip(upstream.iter())
        .zip(fwd.pre_activation.iter().zip(fwd.output.iter()))
    {
        *dp = up * layer.activation.derivative(x, y);
    }

    let mut d_proj = Array2::<f64>::zeros((p, f_out));
    let mut d_src = vec![0.0; p];
    let mut d_dst = vec![0.0; p];
    for i in 0..p {
        let nb = &g.neighbors[i];
        let att = &fwd.alpha[i];
        let dpi = d_pre.row(i);
        let d_alpha: Vec<f64> = nb.iter().map(|&j| dpi.dot(&fwd.projected.row(j))).collect();
        let weighted: f64 = att.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
        for (k, &j) in nb.iter().enumerate() {
            d_proj.row_mut(j).scaled_add(att[k], &dpi);
            let d_logit = att[k] * (d_alpha[k] - weighted);
            let d_raw = d_logit * layer.leaky_grad(fwd.raw_logits[i][k]);
            d_src[i] += d_raw;
            d_dst[j] += d_raw;
        }
    }
    let mut d_a = vec![0.0; 2 * f_out];
    for j in 0..p {
        let row = fwd.projected.row(j);
        for k in 0..f_out {
            d_a[k] += d_src[j] * row[k];
            d_a[f_out + k] += d_dst[j] * row[k];
        }
        let mut dr = d_proj.row_mut(j);
        for k in 0..f_out {
            dr[k] += d_src[j] * a_src[k] + d_dst[j] * a_dst[k];
        }
    }
    let d_w = d_proj.t().dot(&g.node_features);
    Ok(GatGrads { w: d_w, a: d_a })
}

/// Projects each sample's covariates through the node embeddings:
/// `x_tilde = X H' / p`.
pub fn embed_samples(x: &Array2<f64>, node_embeddings: &Array2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != node_embeddings.nrows() {
        return Err(Error::shape(
            "covariate count vs embedding rows",
            node_embeddings.nrows(),
            x.ncols(),
        ));
    }
    Ok(x.dot(node_embeddings) / x.ncols() as f64)
}

/// Adjoint of [`embed_samples`] in its second argument.
pub fn embed_backward(x: &Array2<f64>, upstream: &Array2<f64>) -> Array2<f64> {
    x.t().dot(upstream) / x.ncols() as f64
}
