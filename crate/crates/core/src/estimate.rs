//! Doubly robust, outlier-resistant clusterwise effect estimation.
//!
//! Nuisance models are fit once on the full sample:
//!
//! * a logistic propensity model solving the covariate-balancing equations
//!   `sum_i (d_i - e_i) (1, x_i) = 0` by damped Newton steps;
//! * per-arm ridge outcome regressions made robust by Huber IRLS.
//!
//! Within a cluster the effect is
//!
//! ```text
//! tau_k = mean(mu1 - mu0) + m1 - m0
//! ```
//!
//! where `m_a` is the Huber M-location of the arm-`a` residuals weighted by
//! inverse propensities, with the clip band `c * s_a` from the outcome fit.
//! With an infinite band `m_a` is the weighted residual mean and the estimator
//! is the normalized AIPW estimator.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{merge_small_clusters, Clustering};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::stats::{logistic, mad, sample_sd};

/// Consistency factor turning a MAD into a normal-scale standard deviation.
pub const MAD_SCALE: f64 = 1.4826;
pub const DEFAULT_HUBER_C: f64 = 1.345;
pub const FALLBACK_PENALTY: f64 = 1e-2;
const SATURATION_LOGIT: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub trim: f64,
    /// Huber threshold in residual-scale units; `f64::INFINITY` disables clipping.
    pub huber_c: f64,
    pub ridge_lambda: f64,
    pub bootstrap: usize,
    pub min_per_arm: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            trim: 0.05,
            huber_c: DEFAULT_HUBER_C,
            ridge_lambda: 1.0,
            bootstrap: 500,
            min_per_arm: 4,
        }
    }
}

fn design_row(features: &Array2<f64>, i: usize) -> DVector<f64> {
    let r = features.ncols();
    DVector::from_fn(r + 1, |j, _| if j == 0 { 1.0 } else { features[[i, j - 1]] })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    /// Intercept first.
    pub coefficients: Vec<f64>,
    pub trim: f64,
    /// Whether the quadratic-penalty fallback was used.
    pub penalized: bool,
}

impl PropensityModel {
    pub fn from_coefficients(coefficients: Vec<f64>, trim: f64) -> Self {
        Self {
            coefficients,
            trim,
            penalized: false,
        }
    }

    /// Constant score `p` for any input of width `dim`.
    pub fn constant(p: f64, dim: usize, trim: f64) -> Self {
        let mut c = vec![0.0; dim + 1];
        c[0] = (p / (1.0 - p)).ln();
        Self::from_coefficients(c, trim)
    }

    fn linear(&self, features: &Array2<f64>, i: usize) -> f64 {
        self.coefficients[0]
            + features
                .row(i)
                .iter()
                .zip(&self.coefficients[1..])
                .map(|(x, b)| x * b)
                .sum::<f64>()
    }

    pub fn raw_scores(&self, features: &Array2<f64>) -> Result<Vec<f64>> {
        if features.ncols() + 1 != self.coefficients.len() {
            return Err(Error::shape(
                "propensity feature width",
                self.coefficients.len() - 1,
                features.ncols(),
            ));
        }
        Ok((0..features.nrows())
            .map(|i| logistic(self.linear(features, i)))
            .collect())
    }

    /// Scores clipped to `[trim, 1 - trim]`.
    pub fn scores(&self, features: &Array2<f64>) -> Result<Vec<f64>> {
        let (lo, hi) = (self.trim, 1.0 - self.trim);
        Ok(self
            .raw_scores(features)?
            .into_iter()
            .map(|e| e.clamp(lo, hi))
            .collect())
    }

    /// `sum_i (d_i - e_i) (1, x_i)` with untrimmed scores.
    pub fn balance_residual(&self, features: &Array2<f64>, d: &[u8]) -> Result<Vec<f64>> {
        let e = self.raw_scores(features)?;
        let mut out = vec![0.0; self.coefficients.len()];
        for i in 0..features.nrows() {
            let resid = f64::from(d[i]) - e[i];
            out[0] += resid;
            for (o, x) in out[1..].iter_mut().zip(features.row(i)) {
                *o += resid * x;
            }
        }
        Ok(out)
    }
}

struct NewtonOutcome {
    beta: DVector<f64>,
    converged: bool,
}

fn penalized_loglik(x: &[DVector<f64>], d: &[u8], beta: &DVector<f64>, penalty: f64) -> f64 {
    let mut ll = 0.0;
    for (xi, &di) in x.iter().zip(d) {
        let eta = xi.dot(beta);
        let softplus = if eta > 0.0 {
            eta + (-eta).exp().ln_1p()
        } else {
            eta.exp().ln_1p()
        };
        ll += f64::from(di) * eta - softplus;
    }
    ll - 0.5 * penalty * beta.rows(1, beta.len() - 1).norm_squared()
}

fn newton_logistic(x: &[DVector<f64>], d: &[u8], penalty: f64, max_iter: usize, tol: f64) -> NewtonOutcome {
    let dim = x[0].len();
    let mut beta = DVector::zeros(dim);
    let mut ll = penalized_loglik(x, d, &beta, penalty);
    for _ in 0..max_iter {
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        for (xi, &di) in x.iter().zip(d) {
            let e = logistic(xi.dot(&beta));
            grad.axpy(f64::from(di) - e, xi, 1.0);
            hess.ger(e * (1.0 - e), xi, xi, 1.0);
        }
        for j in 1..dim {
            grad[j] -= penalty * beta[j];
            hess[(j, j)] += penalty;
        }
        if grad.norm() < tol {
            return NewtonOutcome { beta, converged: true };
        }
        let Some(chol) = hess.cholesky() else {
            return NewtonOutcome { beta, converged: false };
        };
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let mut accepted = false;
        // near the optimum the objective is flat to rounding; tolerate that much
        let slack = 1e-12 * ll.abs().max(1.0);
        for _ in 0..40 {
            let cand = &beta + &step * t;
            let cand_ll = penalized_loglik(x, d, &cand, penalty);
            if cand_ll.is_finite() && cand_ll >= ll - slack {
                beta = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // no ascent possible at machine precision: at the optimum or stuck
            let done = grad.norm() < tol.sqrt();
            return NewtonOutcome { beta, converged: done };
        }
        if beta.amax() > 50.0 && penalty == 0.0 {
            return NewtonOutcome { beta, converged: false };
        }
    }
    NewtonOutcome { beta, converged: false }
}

/// Fits a logistic propensity model by solving the covariate-balancing
/// estimating equations. Falls back to a ridge-penalized fit when the
/// unpenalized Newton iterations diverge (e.g. under separation).
pub fn fit_propensity(features: &Array2<f64>, d: &[u8], trim: f64) -> Result<PropensityModel> {
    let n = features.nrows();
    if d.len() != n {
        return Err(Error::shape("treatment length", n, d.len()));
    }
    if !(0.0..0.5).contains(&trim) {
        return Err(Error::Domain(format!("trim {trim} outside [0, 0.5)")));
    }
    let treated = d.iter().filter(|&&v| v == 1).count();
    if treated == 0 || treated == n {
        return Err(Error::Domain("propensity fit needs both arms".into()));
    }
    let x: Vec<DVector<f64>> = (0..n).map(|i| design_row(features, i)).collect();
    let fit = newton_logistic(&x, d, 0.0, 100, 1e-8);
    // under (quasi-)separation the score vanishes only as scores saturate
    let saturated = x.iter().any(|xi| xi.dot(&fit.beta).abs() > SATURATION_LOGIT);
    if fit.converged && !saturated {
        return Ok(PropensityModel {
            coefficients: fit.beta.iter().copied().collect(),
            trim,
            penalized: false,
        });
    }
    log::warn!("propensity Newton iterations did not converge; using penalized fit");
    let fit = newton_logistic(&x, d, FALLBACK_PENALTY, 100, 1e-8);
    if !fit.converged {
        log::warn!("penalized propensity fit stopped before reaching tolerance");
    }
    Ok(PropensityModel {
        coefficients: fit.beta.iter().copied().collect(),
        trim,
        penalized: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    /// Robust residual scale `1.4826 * MAD`.
    pub scale: f64,
}

impl ArmFit {
    fn predict(&self, features: &Array2<f64>, i: usize) -> f64 {
        self.intercept
            + features
                .row(i)
                .iter()
                .zip(&self.coefficients)
                .map(|(x, b)| x * b)
                .sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub control: ArmFit,
    pub treated: ArmFit,
    pub lambda: f64,
    pub huber_c: f64,
}

impl OutcomeModel {
    /// Model predicting zero in both arms.
    pub fn zero(dim: usize, huber_c: f64) -> Self {
        let arm = ArmFit {
            intercept: 0.0,
            coefficients: vec![0.0; dim],
            scale: 0.0,
        };
        Self {
            control: arm.clone(),
            treated: arm,
            lambda: 1.0,
            huber_c,
        }
    }

    /// Recomputes each arm's residual scale from data.
    pub fn with_residual_scales(mut self, features: &Array2<f64>, y: &[f64], d: &[u8]) -> Self {
        for arm in [0u8, 1] {
            let resid: Vec<f64> = (0..y.len())
                .filter(|&i| d[i] == arm)
                .map(|i| y[i] - self.arm(arm).predict(features, i))
                .collect();
            if !resid.is_empty() {
                self.arm_mut(arm).scale = MAD_SCALE * mad(&resid);
            }
        }
        self
    }

    pub fn arm(&self, arm: u8) -> &ArmFit {
        if arm == 1 {
            &self.treated
        } else {
            &self.control
        }
    }

    fn arm_mut(&mut self, arm: u8) -> &mut ArmFit {
        if arm == 1 {
            &mut self.treated
        } else {
            &mut self.control
        }
    }

    /// `(mu0, mu1)` for every row.
    pub fn predict(&self, features: &Array2<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        if features.ncols() != self.treated.coefficients.len() {
            return Err(Error::shape(
                "outcome feature width",
                self.treated.coefficients.len(),
                features.ncols(),
            ));
        }
        let n = features.nrows();
        Ok((
            (0..n).map(|i| self.control.predict(features, i)).collect(),
            (0..n).map(|i| self.treated.predict(features, i)).collect(),
        ))
    }

    /// Clip half-width `c * s` for an arm, or infinity when clipping is off.
    pub fn band(&self, arm: u8) -> f64 {
        let s = self.arm(arm).scale;
        if self.huber_c.is_finite() && s > 0.0 {
            self.huber_c * s
        } else {
            f64::INFINITY
        }
    }
}

fn weighted_ridge(x: &[DVector<f64>], y: &[f64], w: &[f64], lambda: f64) -> Result<DVector<f64>> {
    let dim = x[0].len();
    let mut lam = lambda;
    for attempt in 0..4 {
        let mut a = DMatrix::zeros(dim, dim);
        let mut b = DVector::zeros(dim);
        for ((xi, &yi), &wi) in x.iter().zip(y).zip(w) {
            a.ger(wi, xi, xi, 1.0);
            b.axpy(wi * yi, xi, 1.0);
        }
        for j in 1..dim {
            a[(j, j)] += lam;
        }
        match crate::stats::solve_spd(a, &b) {
            Ok(beta) => return Ok(beta),
            Err(_) if attempt < 3 => {
                log::warn!(
                    "singular normal equations at lambda = {lam}; retrying with {}",
                    lam * 10.0
                );
                lam *= 10.0;
            }
            Err(e) => return Err(e),
        }
    }
    unreachable!("loop returns on the last attempt")
}

fn fit_arm(x: &[DVector<f64>], y: &[f64], lambda: f64, c: f64) -> Result<ArmFit> {
    let n = y.len();
    let mut w = vec![1.0; n];
    let mut beta = weighted_ridge(x, y, &w, lambda)?;
    let residuals = |beta: &DVector<f64>| -> Vec<f64> { x.iter().zip(y).map(|(xi, yi)| yi - xi.dot(beta)).collect() };
    if c.is_finite() {
        for _ in 0..50 {
            let r = residuals(&beta);
            let s = MAD_SCALE * mad(&r);
            if s <= 0.0 {
                break;
            }
            for (wi, ri) in w.iter_mut().zip(&r) {
                let u = (ri / s).abs();
                *wi = if u <= c { 1.0 } else { c / u };
            }
            let next = weighted_ridge(x, y, &w, lambda)?;
            let change = (&next - &beta).amax();
            beta = next;
            if change < 1e-8 {
                break;
            }
        }
    }
    let scale = MAD_SCALE * mad(&residuals(&beta));
    Ok(ArmFit {
        intercept: beta[0],
        coefficients: beta.iter().skip(1).copied().collect(),
        scale,
    })
}

/// Per-arm ridge regressions with Huber IRLS (`huber_c = inf` gives plain ridge).
pub fn fit_outcome(features: &Array2<f64>, y: &[f64], d: &[u8], lambda: f64, huber_c: f64) -> Result<OutcomeModel> {
    let n = features.nrows();
    if y.len() != n || d.len() != n {
        return Err(Error::shape(
            "outcome inputs",
            n,
            format!("y {} / d {}", y.len(), d.len()),
        ));
    }
    if !(lambda > 0.0) {
        return Err(Error::Domain("ridge lambda must be positive".into()));
    }
    if !(huber_c > 0.0) {
        return Err(Error::Domain("huber c must be positive".into()));
    }
    let mut arms = Vec::with_capacity(2);
    for arm in [0u8, 1] {
        let rows: Vec<usize> = (0..n).filter(|&i| d[i] == arm).collect();
        if rows.len() < 2 {
            return Err(Error::Domain(format!(
                "arm {arm} has {} samples; need at least 2",
                rows.len()
            )));
        }
        let x: Vec<DVector<f64>> = rows.iter().map(|&i| design_row(features, i)).collect();
        let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        arms.push(fit_arm(&x, &ys, lambda, huber_c)?);
    }
    let treated = arms.pop().expect("two arms");
    let control = arms.pop().expect("two arms");
    Ok(OutcomeModel {
        control,
        treated,
        lambda,
        huber_c,
    })
}

/// Huber M-location: the `m` solving `sum_i w_i psi(r_i - m) = 0`, where
/// `psi` clips to `[-band, band]`. An infinite band gives the weighted mean.
pub fn huber_location(r: &[f64], w: &[f64], band: f64) -> f64 {
    let total: f64 = w.iter().sum();
    let mean = r.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / total;
    if !band.is_finite() {
        return mean;
    }
    let score = |m: f64| -> f64 { r.iter().zip(w).map(|(ri, wi)| wi * (ri - m).clamp(-band, band)).sum() };
    let mut lo = r.iter().copied().fold(f64::INFINITY, f64::min) - band;
    let mut hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max) + band;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if score(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let m = 0.5 * (lo + hi);
    // the score is linear on the partition containing the root: solve it exactly
    let (mut inner_w, mut inner_wr, mut clipped) = (0.0, 0.0, 0.0);
    for (ri, wi) in r.iter().zip(w) {
        let u = ri - m;
        if u > band {
            clipped += wi * band;
        } else if u < -band {
            clipped -= wi * band;
        } else {
            inner_w += wi;
            inner_wr += wi * ri;
        }
    }
    if inner_w > 0.0 {
        let exact = (inner_wr + clipped) / inner_w;
        if (exact - m).abs() <= (hi - lo).max(1e-12 * (1.0 + m.abs())) * 4.0 {
            return exact;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEffect {
    pub cluster: usize,
    pub tau_hat: f64,
    pub se_hat: f64,
    pub n_k: usize,
    pub n_treated: usize,
    pub n_control: usize,
    pub is_outlier_cluster: bool,
}

/// Per-unit nuisance values a cluster estimate is built from.
#[derive(Debug, Clone)]
struct Units {
    mu0: Vec<f64>,
    mu1: Vec<f64>,
    e: Vec<f64>,
    y: Vec<f64>,
    d: Vec<u8>,
}

impl Units {
    fn gather(idx: &[usize], mu0: &[f64], mu1: &[f64], e: &[f64], y: &[f64], d: &[u8]) -> Self {
        Self {
            mu0: idx.iter().map(|&i| mu0[i]).collect(),
            mu1: idx.iter().map(|&i| mu1[i]).collect(),
            e: idx.iter().map(|&i| e[i]).collect(),
            y: idx.iter().map(|&i| y[i]).collect(),
            d: idx.iter().map(|&i| d[i]).collect(),
        }
    }

    fn counts(&self) -> (usize, usize) {
        let t = self.d.iter().filter(|&&v| v == 1).count();
        (t, self.d.len() - t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    /// Outcome-regression plus robust augmentation (or plain AIPW when the
    /// outcome model's band is infinite).
    Augmented,
    Ipw,
    OutcomeRegression,
}

fn point_estimate(kind: EffectKind, u: &Units, sample: &[usize], band1: f64, band0: f64) -> f64 {
    let k = sample.len() as f64;
    match kind {
        EffectKind::OutcomeRegression => sample.iter().map(|&i| u.mu1[i] - u.mu0[i]).sum::<f64>() / k,
        EffectKind::Ipw => {
            sample
                .iter()
                .map(|&i| {
                    if u.d[i] == 1 {
                        u.y[i] / u.e[i]
                    } else {
                        -u.y[i] / (1.0 - u.e[i])
                    }
                })
                .sum::<f64>()
                / k
        }
        EffectKind::Augmented => {
            let base = sample.iter().map(|&i| u.mu1[i] - u.mu0[i]).sum::<f64>() / k;
            let (mut r1, mut w1, mut r0, mut w0) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for &i in sample {
                if u.d[i] == 1 {
                    r1.push(u.y[i] - u.mu1[i]);
                    w1.push(1.0 / u.e[i]);
                } else {
                    r0.push(u.y[i] - u.mu0[i]);
                    w0.push(1.0 / (1.0 - u.e[i]));
                }
            }
            base + huber_location(&r1, &w1, band1) - huber_location(&r0, &w0, band0)
        }
    }
}

/// Inputs shared by every cluster of one estimation run.
#[derive(Debug, Clone)]
pub struct Nuisance {
    pub scores: Vec<f64>,
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    pub band0: f64,
    pub band1: f64,
}

impl Nuisance {
    pub fn new(features: &Array2<f64>, pm: &PropensityModel, om: &OutcomeModel) -> Result<Self> {
        let (mu0, mu1) = om.predict(features)?;
        Ok(Self {
            scores: pm.scores(features)?,
            mu0,
            mu1,
            band0: om.band(0),
            band1: om.band(1),
        })
    }
}

/// Effect over `idx` with a bootstrap standard error that resamples units and
/// keeps the nuisance models fixed.
pub fn cluster_effect(
    kind: EffectKind,
    nuisance: &Nuisance,
    y: &[f64],
    d: &[u8],
    idx: &[usize],
    min_per_arm: usize,
    bootstrap: usize,
    rng: &RngState,
) -> Result<ClusterEffect> {
    let u = Units::gather(idx, &nuisance.mu0, &nuisance.mu1, &nuisance.scores, y, d);
    let (n_treated, n_control) = u.counts();
    if n_treated < min_per_arm || n_control < min_per_arm {
        return Err(Error::ClusterSize {
            cluster: 0,
            n_treated,
            n_control,
            min: min_per_arm,
        });
    }
    let all: Vec<usize> = (0..idx.len()).collect();
    let tau_hat = point_estimate(kind, &u, &all, nuisance.band1, nuisance.band0);

    let mut r = rng.rng();
    let mut draws = Vec::with_capacity(bootstrap);
    let mut sample = vec![0; idx.len()];
    let mut attempts = 0;
    while draws.len() < bootstrap && attempts < 20 * bootstrap.max(1) {
        attempts += 1;
        for s in sample.iter_mut() {
            *s = r.random_range(0..idx.len());
        }
        let t = sample.iter().filter(|&&i| u.d[i] == 1).count();
        if t == 0 || t == sample.len() {
            continue;
        }
        draws.push(point_estimate(kind, &u, &sample, nuisance.band1, nuisance.band0));
    }
    Ok(ClusterEffect {
        cluster: 0,
        tau_hat,
        se_hat: sample_sd(&draws),
        n_k: idx.len(),
        n_treated,
        n_control,
        is_outlier_cluster: false,
    })
}

/// Robust doubly robust effect over the units in `idx`.
pub fn tau_dr(
    features: &Array2<f64>,
    y: &[f64],
    d: &[u8],
    pm: &PropensityModel,
    om: &OutcomeModel,
    idx: &[usize],
    min_per_arm: usize,
    bootstrap: usize,
    rng: &RngState,
) -> Result<ClusterEffect> {
    let nuisance = Nuisance::new(features, pm, om)?;
    cluster_effect(EffectKind::Augmented, &nuisance, y, d, idx, min_per_arm, bootstrap, rng)
}

/// Fits propensity and plain (unclipped) ridge outcome models and returns the
/// normalized AIPW estimate over `idx`.
pub fn tau_plain_aipw(
    features: &Array2<f64>,
    y: &[f64],
    d: &[u8],
    cfg: &EstimatorConfig,
    idx: &[usize],
    rng: &RngState,
) -> Result<ClusterEffect> {
    let pm = fit_propensity(features, d, cfg.trim)?;
    let om = fit_outcome(features, y, d, cfg.ridge_lambda, f64::INFINITY)?;
    tau_dr(features, y, d, &pm, &om, idx, cfg.min_per_arm, cfg.bootstrap, rng)
}

/// Horvitz-Thompson difference with trimmed fitted propensities.
pub fn tau_ipw(
    features: &Array2<f64>,
    y: &[f64],
    d: &[u8],
    cfg: &EstimatorConfig,
    idx: &[usize],
    rng: &RngState,
) -> Result<ClusterEffect> {
    let pm = fit_propensity(features, d, cfg.trim)?;
    let nuisance = Nuisance {
        scores: pm.scores(features)?,
        mu0: vec![0.0; y.len()],
        mu1: vec![0.0; y.len()],
        band0: f64::INFINITY,
        band1: f64::INFINITY,
    };
    cluster_effect(
        EffectKind::Ipw,
        &nuisance,
        y,
        d,
        idx,
        cfg.min_per_arm,
        cfg.bootstrap,
        rng,
    )
}

/// Mean of `mu1 - mu0` from plain ridge outcome fits.
pub fn tau_or(
    features: &Array2<f64>,
    y: &[f64],
    d: &[u8],
    cfg: &EstimatorConfig,
    idx: &[usize],
    rng: &RngState,
) -> Result<ClusterEffect> {
    let om = fit_outcome(features, y, d, cfg.ridge_lambda, f64::INFINITY)?;
    let (mu0, mu1) = om.predict(features)?;
    let nuisance = Nuisance {
        scores: vec![0.5; y.len()],
        mu0,
        mu1,
        band0: f64::INFINITY,
        band1: f64::INFINITY,
    };
    cluster_effect(
        EffectKind::OutcomeRegression,
        &nuisance,
        y,
        d,
        idx,
        cfg.min_per_arm,
        cfg.bootstrap,
        rng,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallEffect {
    pub tau_hat: f64,
    pub se: f64,
}

#[derive(Debug, Clone)]
pub struct EffectEstimates {
    pub clusters: Vec<ClusterEffect>,
    pub overall: OverallEffect,
    /// `tau_hat` of each unit's cluster.
    pub per_sample: Vec<f64>,
    /// Clustering after small clusters were merged.
    pub clustering: Clustering,
    pub propensity: PropensityModel,
    pub outcome: OutcomeModel,
}

/// Fits nuisance models on `features` (latent codes), merges clusters that
/// lack `min_per_arm` units in either arm and estimates each cluster's effect.
pub fn estimate_all(
    features: &Array2<f64>,
    y: &[f64],
    d: &[u8],
    clustering: &Clustering,
    cfg: &EstimatorConfig,
    rng: &RngState,
) -> Result<EffectEstimates> {
    let n = features.nrows();
    if clustering.labels.len() != n {
        return Err(Error::shape("cluster labels", n, clustering.labels.len()));
    }
    let pm = fit_propensity(features, d, cfg.trim)?;
    let om = fit_outcome(features, y, d, cfg.ridge_lambda, cfg.huber_c)?;
    let nuisance = Nuisance::new(features, &pm, &om)?;
    let merged = merge_small_clusters(clustering, features, d, cfg.min_per_arm)?;

    let mut clusters = Vec::with_capacity(merged.k());
    let mut per_sample = vec![0.0; n];
    for k in 0..merged.k() {
        let idx = merged.members(k);
        // keyed by the first member so the draws do not depend on label ids
        let stream = rng.split(&format!("bootstrap/{}", idx[0]));
        let mut eff = cluster_effect(
            EffectKind::Augmented,
            &nuisance,
            y,
            d,
            &idx,
            cfg.min_per_arm,
            cfg.bootstrap,
            &stream,
        )
        .map_err(|e| match e {
            Error::ClusterSize {
                n_treated,
                n_control,
                min,
                ..
            } => Error::ClusterSize {
                cluster: k,
                n_treated,
                n_control,
                min,
            },
            other => other,
        })?;
        eff.cluster = k;
        eff.is_outlier_cluster = merged.is_outlier_cluster(k);
        for &i in &idx {
            per_sample[i] = eff.tau_hat;
        }
        clusters.push(eff);
    }
    let overall = overall_effect(&clusters, n);
    Ok(EffectEstimates {
        clusters,
        overall,
        per_sample,
        clustering: merged,
        propensity: pm,
        outcome: om,
    })
}

/// Size-weighted average of cluster effects; the standard error treats the
/// cluster estimates as independent.
pub fn overall_effect(clusters: &[ClusterEffect], n: usize) -> OverallEffect {
    let n = n as f64;
    let tau_hat = clusters.iter().map(|c| c.n_k as f64 * c.tau_hat).sum::<f64>() / n;
    let se = clusters
        .iter()
        .map(|c| (c.n_k as f64 / n).powi(2) * c.se_hat * c.se_hat)
        .sum::<f64>()
        .sqrt();
    OverallEffect { tau_hat, se }
}
