//! Independent oracles shared by the estimator tests and the acceptance suite.
#![allow(dead_code)]

use hte_core::estimate::{ArmFit, OutcomeModel, DEFAULT_HUBER_C};
use hte_core::RngState;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

/// Root of `m -> sum_i w_i clip(r_i - m, -band, band)` found by walking the
/// sorted breakpoints and interpolating on the bracketing linear piece.
pub fn huber_location_breakpoints(r: &[f64], w: &[f64], band: f64) -> f64 {
    let f = |m: f64| -> f64 { r.iter().zip(w).map(|(ri, wi)| wi * (ri - m).clamp(-band, band)).sum() };
    let mut knots: Vec<f64> = r.iter().flat_map(|&ri| [ri - band, ri + band]).collect();
    knots.sort_by(f64::total_cmp);
    for pair in knots.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (fa, fb) = (f(a), f(b));
        if fa >= 0.0 && fb <= 0.0 {
            if fa == fb {
                return a;
            }
            return a + (b - a) * fa / (fa - fb);
        }
    }
    panic!("no sign change");
}

pub fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub struct Instance {
    pub x: Array2<f64>,
    pub y: Vec<f64>,
    pub d: Vec<u8>,
}

pub fn eight_sample_instance() -> Instance {
    let x = Array2::from_shape_vec((8, 1), vec![-1.2, -0.5, 0.3, 1.1, -0.8, 0.1, 0.7, 1.5]).unwrap();
    Instance {
        x,
        y: vec![0.4, 2.9, 1.2, 3.8, 2.1, 1.0, 9.5, 1.9],
        d: vec![0, 1, 0, 1, 1, 0, 1, 0],
    }
}

/// tau = mean(mu1 - mu0) + m1 - m0 computed term by term.
#[allow(clippy::too_many_arguments)]
pub fn manual_tau(
    x: &[f64],
    y: &[f64],
    d: &[u8],
    beta: (f64, f64),
    trim: f64,
    ctrl: (f64, f64),
    trt: (f64, f64),
    band0: f64,
    band1: f64,
) -> f64 {
    let n = x.len() as f64;
    let mut base = 0.0;
    let (mut r1, mut w1, mut r0, mut w0) = (vec![], vec![], vec![], vec![]);
    for i in 0..x.len() {
        let mu0 = ctrl.0 + ctrl.1 * x[i];
        let mu1 = trt.0 + trt.1 * x[i];
        let e = logistic(beta.0 + beta.1 * x[i]).clamp(trim, 1.0 - trim);
        base += mu1 - mu0;
        if d[i] == 1 {
            r1.push(y[i] - mu1);
            w1.push(1.0 / e);
        } else {
            r0.push(y[i] - mu0);
            w0.push(1.0 / (1.0 - e));
        }
    }
    let loc = |r: &[f64], w: &[f64], band: f64| {
        if band.is_finite() {
            huber_location_breakpoints(r, w, band)
        } else {
            r.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>()
        }
    };
    base / n + loc(&r1, &w1, band1) - loc(&r0, &w0, band0)
}

/// x ~ N(0, I2), e = logistic(0.4 x1 - 0.4 x2), y = 0.5 + 0.5 x1 - 0.25 x2 + 2 d + N(0, 0.25^2).
/// Confounding shifts the raw difference in means by about 0.3, while the
/// sampling sd of an IPW-type estimate at n = 2000 is about 0.03.
pub fn linear_oracle(n: usize, seed: u64) -> Instance {
    let mut r = RngState::new(seed).rng();
    let x = Array2::from_shape_fn((n, 2), |_| r.sample(StandardNormal));
    let mut d = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let e = logistic(0.4 * x[[i, 0]] - 0.4 * x[[i, 1]]);
        let di = u8::from(r.random::<f64>() < e);
        let eps: f64 = r.sample(StandardNormal);
        y.push(0.5 + 0.5 * x[[i, 0]] - 0.25 * x[[i, 1]] + 2.0 * f64::from(di) + 0.25 * eps);
        d.push(di);
    }
    Instance { x, y, d }
}

pub fn true_outcome_model() -> OutcomeModel {
    OutcomeModel {
        control: ArmFit {
            intercept: 0.5,
            coefficients: vec![0.5, -0.25],
            scale: 0.0,
        },
        treated: ArmFit {
            intercept: 2.5,
            coefficients: vec![0.5, -0.25],
            scale: 0.0,
        },
        lambda: 1.0,
        huber_c: DEFAULT_HUBER_C,
    }
}
