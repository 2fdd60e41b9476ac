//! Simulation of censored observational data with heterogeneous effects.
//!
//! Covariates are equicorrelated Gaussians; treatment follows a logistic
//! model with interactions; event times are nonlinear in the covariates with
//! an additive heterogeneous effect; censoring times are exponential; and a
//! fraction of rows can have gross additive noise on every covariate.
//!
//! Treatment, potential outcomes and the ground-truth effect are always
//! generated from the clean covariates. Contamination only corrupts what the
//! analyst observes.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::stats::logistic;

/// Coefficients of the treatment assignment model
/// `logit P(D=1) = b1 x1 + b2 x2 + b12 x1 x2 + b33 x3^2 + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreatmentCoefs {
    pub x1: f64,
    pub x2: f64,
    pub x1x2: f64,
    pub x3_sq: f64,
    pub offset: f64,
}

impl Default for TreatmentCoefs {
    fn default() -> Self {
        Self {
            x1: 0.4,
            x2: -0.4,
            x1x2: 0.5,
            x3_sq: 0.3,
            offset: -0.3,
        }
    }
}

impl TreatmentCoefs {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.x1 * x[0] + self.x2 * x[1] + self.x1x2 * x[0] * x[1] + self.x3_sq * x[2] * x[2] + self.offset
    }

    pub fn propensity(&self, x: &[f64]) -> f64 {
        logistic(self.logit(x))
    }
}

/// Baseline `mu0 = b0 + b1 x1 + b_sin sin(x2) + b34 x3 x4`, effect
/// `tau = t0 + t1 x1 + t_step 1(x2 > 0)`, Gaussian noise with `noise_sd`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutcomeCoefs {
    pub base: f64,
    pub base_x1: f64,
    pub base_sin_x2: f64,
    pub base_x3x4: f64,
    pub effect: f64,
    pub effect_x1: f64,
    pub effect_x2_pos: f64,
    pub noise_sd: f64,
}

impl Default for OutcomeCoefs {
    fn default() -> Self {
        Self {
            base: 1.0,
            base_x1: 0.5,
            base_sin_x2: 0.5,
            base_x3x4: 0.25,
            effect: 1.0,
            effect_x1: 0.8,
            effect_x2_pos: 0.6,
            noise_sd: 0.5,
        }
    }
}

impl OutcomeCoefs {
    pub fn baseline(&self, x: &[f64]) -> f64 {
        self.base + self.base_x1 * x[0] + self.base_sin_x2 * x[1].sin() + self.base_x3x4 * x[2] * x[3]
    }

    pub fn effect(&self, x: &[f64]) -> f64 {
        let step = if x[1] > 0.0 { 1.0 } else { 0.0 };
        self.effect + self.effect_x1 * x[0] + self.effect_x2_pos * step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpCoefficients {
    pub treatment: TreatmentCoefs,
    pub outcome: OutcomeCoefs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub contamination_ratio: f64,
    pub noise_scale: f64,
    /// `None` disables censoring (every event observed).
    pub censor_rate: Option<f64>,
    pub seed: u64,
    pub coefficients: DgpCoefficients,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 100,
            p: 100,
            rho: 0.3,
            contamination_ratio: 0.0,
            noise_scale: 5.0,
            censor_rate: Some(0.1),
            seed: 0,
            coefficients: DgpCoefficients::default(),
        }
    }
}

/// Smallest covariate dimension the outcome and treatment models accept.
pub const MIN_P: usize = 5;

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Domain("n must be positive".into()));
        }
        if self.p < MIN_P {
            return Err(Error::Domain(format!("p = {} < {MIN_P}", self.p)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Domain(format!("rho = {} outside [0, 1)", self.rho)));
        }
        if !(0.0..1.0).contains(&self.contamination_ratio) {
            return Err(Error::Domain(format!(
                "contamination ratio {} outside [0, 1)",
                self.contamination_ratio
            )));
        }
        if !(self.noise_scale > 0.0) {
            return Err(Error::Domain("noise_scale must be positive".into()));
        }
        if let Some(rate) = self.censor_rate {
            if !(rate > 0.0) {
                return Err(Error::Domain(format!("censor rate {rate} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PotentialOutcomes {
    pub t0: f64,
    pub t1: f64,
    pub tau: f64,
}

/// Rows i.i.d. `N(0, S)` with unit variances and off-diagonal `rho`,
/// drawn as `sqrt(rho) g + sqrt(1 - rho) e` with a shared scalar factor `g`.
pub fn gen_covariates(n: usize, p: usize, rho: f64, rng: &RngState) -> Array2<f64> {
    let mut r = rng.rng();
    let (a, b) = (rho.sqrt(), (1.0 - rho).sqrt());
    let mut x = Array2::zeros((n, p));
    for mut row in x.rows_mut() {
        let g: f64 = StandardNormal.sample(&mut r);
        for v in row.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut r);
            *v = a * g + b * e;
        }
    }
    x
}

pub fn gen_treatment(x: &Array2<f64>, coefs: &TreatmentCoefs, rng: &RngState) -> Result<Vec<u8>> {
    check_width(x)?;
    let mut r = rng.rng();
    Ok(x.rows()
        .into_iter()
        .map(|row| {
            let e = coefs.propensity(row.as_slice().expect("standard layout"));
            u8::from(r.random::<f64>() < e)
        })
        .collect())
}

pub fn gen_outcomes(x: &Array2<f64>, coefs: &OutcomeCoefs, rng: &RngState) -> Result<Vec<PotentialOutcomes>> {
    check_width(x)?;
    let mut r = rng.rng();
    Ok(x.rows()
        .into_iter()
        .map(|row| {
            let xs = row.as_slice().expect("standard layout");
            let e0: f64 = StandardNormal.sample(&mut r);
            let e1: f64 = StandardNormal.sample(&mut r);
            let mu0 = coefs.baseline(xs);
            let tau = coefs.effect(xs);
            PotentialOutcomes {
                t0: mu0 + coefs.noise_sd * e0,
                t1: mu0 + tau + coefs.noise_sd * e1,
                tau,
            }
        })
        .collect())
}

pub fn gen_censoring(n: usize, rate: f64, rng: &RngState) -> Result<Vec<f64>> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::Domain(format!(
            "censoring rate {rate} must be positive and finite"
        )));
    }
    let exp = Exp::new(rate).map_err(|e| Error::Domain(e.to_string()))?;
    let mut r = rng.rng();
    Ok((0..n).map(|_| exp.sample(&mut r)).collect())
}

/// Adds `N(0, scale^2)` noise to every covariate of `floor(ratio * n)` rows
/// chosen uniformly without replacement. Returns the new matrix and the
/// sorted indices of the altered rows.
pub fn contaminate(x: &Array2<f64>, ratio: f64, scale: f64, rng: &RngState) -> Result<(Array2<f64>, Vec<usize>)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Domain(format!("contamination ratio {ratio} outside [0, 1)")));
    }
    let n = x.nrows();
    let count = ((ratio * n as f64) + 1e-9).floor() as usize;
    let mut out = x.clone();
    if count == 0 {
        return Ok((out, Vec::new()));
    }
    let mut r = rng.rng();
    let mut rows = sample(&mut r, n, count).into_vec();
    rows.sort_unstable();
    for &i in &rows {
        for v in out.row_mut(i).iter_mut() {
            let e: f64 = StandardNormal.sample(&mut r);
            *v += scale * e;
        }
    }
    Ok((out, rows))
}

/// Everything the generator produced, including quantities an analyst never sees.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: Dataset,
    pub clean_x: Array2<f64>,
    pub contaminated: Vec<usize>,
    pub potential: Vec<PotentialOutcomes>,
    pub censoring: Vec<f64>,
}

pub fn simulate(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let root = RngState::new(cfg.seed);
    let clean_x = gen_covariates(cfg.n, cfg.p, cfg.rho, &root.split("covariates"));
    let (observed_x, contaminated) = contaminate(
        &clean_x,
        cfg.contamination_ratio,
        cfg.noise_scale,
        &root.split("contamination"),
    )?;
    let d = gen_treatment(&clean_x, &cfg.coefficients.treatment, &root.split("treatment"))?;
    let potential = gen_outcomes(&clean_x, &cfg.coefficients.outcome, &root.split("outcomes"))?;
    let censoring = match cfg.censor_rate {
        Some(rate) => gen_censoring(cfg.n, rate, &root.split("censoring"))?,
        None => vec![f64::INFINITY; cfg.n],
    };

    let mut y = Vec::with_capacity(cfg.n);
    let mut delta = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let t = if d[i] == 1 { potential[i].t1 } else { potential[i].t0 };
        let c = censoring[i];
        y.push(t.min(c));
        delta.push(u8::from(t <= c));
    }
    let truth = potential.iter().map(|po| po.tau).collect();
    let dataset = Dataset::new(y, delta, d, observed_x, Some(truth))?;
    Ok(Simulation {
        dataset,
        clean_x,
        contaminated,
        potential,
        censoring,
    })
}

pub fn gen_dataset(cfg: &SimConfig) -> Result<Dataset> {
    simulate(cfg).map(|s| s.dataset)
}

fn check_width(x: &Array2<f64>) -> Result<()> {
    if x.ncols() < MIN_P {
        return Err(Error::Domain(format!("need p >= {MIN_P}, got {}", x.ncols())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::mean;

    fn corr(x: &Array2<f64>, a: usize, b: usize) -> f64 {
        let ca = x.column(a);
        let cb = x.column(b);
        let (ma, mb) = (ca.mean().unwrap(), cb.mean().unwrap());
        let cov: f64 = ca.iter().zip(cb).map(|(u, v)| (u - ma) * (v - mb)).sum();
        let va: f64 = ca.iter().map(|u| (u - ma).powi(2)).sum();
        let vb: f64 = cb.iter().map(|v| (v - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn independent_covariates_when_rho_zero() {
        let x = gen_covariates(10_000, 2, 0.0, &RngState::new(1));
        assert!(corr(&x, 0, 1).abs() < 0.05);
    }

    #[test]
    fn equicorrelation_matches_rho() {
        let x = gen_covariates(10_000, 2, 0.3, &RngState::new(2));
        assert!((corr(&x, 0, 1) - 0.3).abs() < 0.03);
    }

    #[test]
    fn covariates_are_deterministic() {
        let s = RngState::new(3).split("c");
        assert_eq!(gen_covariates(50, 6, 0.3, &s), gen_covariates(50, 6, 0.3, &s));
    }

    #[test]
    fn propensity_at_origin() {
        let e = TreatmentCoefs::default().propensity(&[0.0; 5]);
        assert!((e - 0.425_557_483_188_341).abs() < 1e-12);
    }

    #[test]
    fn null_treatment_model_is_balanced() {
        let coefs = TreatmentCoefs {
            x1: 0.0,
            x2: 0.0,
            x1x2: 0.0,
            x3_sq: 0.0,
            offset: 0.0,
        };
        let x = gen_covariates(10_000, 5, 0.3, &RngState::new(4));
        let d = gen_treatment(&x, &coefs, &RngState::new(5)).unwrap();
        let frac = d.iter().map(|&v| f64::from(v)).sum::<f64>() / 10_000.0;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn default_prevalence_is_moderate() {
        let x = gen_covariates(10_000, 5, 0.3, &RngState::new(6));
        let d = gen_treatment(&x, &TreatmentCoefs::default(), &RngState::new(7)).unwrap();
        let frac = d.iter().map(|&v| f64::from(v)).sum::<f64>() / 10_000.0;
        assert!((0.3..=0.7).contains(&frac), "{frac}");
    }

    #[test]
    fn noiseless_outcomes_at_origin() {
        let coefs = OutcomeCoefs {
            noise_sd: 0.0,
            ..OutcomeCoefs::default()
        };
        let x = Array2::zeros((1, 5));
        let po = gen_outcomes(&x, &coefs, &RngState::new(0)).unwrap()[0];
        assert_eq!((po.t0, po.t1, po.tau), (1.0, 2.0, 1.0));
    }

    #[test]
    fn mean_effect_matches_design() {
        // E[tau] = 1 + 0.8 E[x1] + 0.6 P(x2 > 0) = 1.3
        let x = gen_covariates(100_000, 5, 0.3, &RngState::new(8));
        let po = gen_outcomes(&x, &OutcomeCoefs::default(), &RngState::new(9)).unwrap();
        let m = mean(&po.iter().map(|p| p.tau).collect::<Vec<_>>());
        assert!((m - 1.3).abs() < 0.01, "{m}");
    }

    #[test]
    fn effect_ignores_outcome_noise() {
        let x = gen_covariates(30, 5, 0.3, &RngState::new(10));
        let a = gen_outcomes(&x, &OutcomeCoefs::default(), &RngState::new(11)).unwrap();
        let b = gen_outcomes(&x, &OutcomeCoefs::default(), &RngState::new(12)).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.tau, pb.tau);
            assert_ne!(pa.t0, pb.t0);
        }
    }

    #[test]
    fn exponential_mean() {
        let c = gen_censoring(100_000, 1.0, &RngState::new(13)).unwrap();
        assert!((mean(&c) - 1.0).abs() < 0.02);
    }

    #[test]
    fn censoring_rejects_non_positive_rate() {
        assert!(gen_censoring(3, 0.0, &RngState::new(0)).is_err());
        assert!(gen_censoring(3, -1.0, &RngState::new(0)).is_err());
    }

    #[test]
    fn huge_rate_censors_nearly_everything() {
        let cfg = SimConfig {
            n: 2_000,
            p: 5,
            censor_rate: Some(1e6),
            seed: 14,
            ..SimConfig::default()
        };
        let sim = simulate(&cfg).unwrap();
        // only units with a negative event time can beat a near-zero censoring time
        for i in 0..cfg.n {
            let d = sim.dataset.d()[i];
            let t = if d == 1 {
                sim.potential[i].t1
            } else {
                sim.potential[i].t0
            };
            assert_eq!(sim.dataset.delta()[i] == 1, t <= sim.censoring[i]);
        }
        let observed = sim.dataset.delta().iter().filter(|&&v| v == 1).count();
        let negative = (0..cfg.n)
            .filter(|&i| {
                let t = if sim.dataset.d()[i] == 1 {
                    sim.potential[i].t1
                } else {
                    sim.potential[i].t0
                };
                t <= 0.0
            })
            .count();
        assert!(observed <= negative + 2, "{observed} vs {negative}");
    }

    #[test]
    fn default_censoring_fraction() {
        let cfg = SimConfig {
            n: 10_000,
            p: 5,
            seed: 15,
            ..SimConfig::default()
        };
        let ds = gen_dataset(&cfg).unwrap();
        let censored = ds.delta().iter().filter(|&&v| v == 0).count() as f64 / 10_000.0;
        assert!((0.05..=0.3).contains(&censored), "{censored}");
    }

    #[test]
    fn no_censoring_flag_observes_all_events() {
        let cfg = SimConfig {
            n: 200,
            p: 5,
            censor_rate: None,
            seed: 16,
            ..SimConfig::default()
        };
        assert!(gen_dataset(&cfg).unwrap().delta().iter().all(|&v| v == 1));
    }

    #[test]
    fn zero_ratio_leaves_matrix_untouched() {
        let x = gen_covariates(40, 5, 0.3, &RngState::new(17));
        let (y, idx) = contaminate(&x, 0.0, 5.0, &RngState::new(18)).unwrap();
        assert_eq!(x, y);
        assert!(idx.is_empty());
    }

    #[test]
    fn contamination_alters_exact_row_count() {
        let x = gen_covariates(100, 5, 0.3, &RngState::new(19));
        let (y, idx) = contaminate(&x, 0.2, 5.0, &RngState::new(20)).unwrap();
        assert_eq!(idx.len(), 20);
        for i in 0..100 {
            let changed = x.row(i) != y.row(i);
            assert_eq!(changed, idx.binary_search(&i).is_ok(), "row {i}");
        }
    }

    #[test]
    fn grid_cell_shape() {
        let cfg = SimConfig {
            n: 20,
            seed: 21,
            ..SimConfig::default()
        };
        let ds = gen_dataset(&cfg).unwrap();
        assert_eq!((ds.n(), ds.p()), (20, 100));
        assert!(ds.truth().is_some());
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SimConfig {
            n: 30,
            p: 8,
            contamination_ratio: 0.1,
            seed: 22,
            ..SimConfig::default()
        };
        assert_eq!(
            gen_dataset(&cfg).unwrap().to_csv_string(),
            gen_dataset(&cfg).unwrap().to_csv_string()
        );
    }

    #[test]
    fn contamination_never_changes_truth() {
        let base = SimConfig {
            n: 50,
            p: 6,
            seed: 23,
            ..SimConfig::default()
        };
        let dirty = SimConfig {
            contamination_ratio: 0.2,
            ..base.clone()
        };
        let a = simulate(&base).unwrap();
        let b = simulate(&dirty).unwrap();
        assert_eq!(a.dataset.truth(), b.dataset.truth());
        assert_eq!(a.dataset.d(), b.dataset.d());
        assert_eq!(a.dataset.y(), b.dataset.y());
        assert_ne!(a.dataset.x(), b.dataset.x());
    }

    #[test]
    fn rejects_small_p() {
        let cfg = SimConfig {
            p: 4,
            ..SimConfig::default()
        };
        assert!(matches!(gen_dataset(&cfg), Err(Error::Domain(_))));
    }
}
