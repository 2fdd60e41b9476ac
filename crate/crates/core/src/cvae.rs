//! Conditional variational autoencoder over structure-aware sample
//! representations, trained jointly with the graph attention layer.
//!
//! Encoder: `[x_tilde, t] -> tanh hidden -> (mu, logvar)`, diagonal Gaussian
//! posterior. Decoder: `[z, t] -> tanh hidden -> reconstruction mean`, unit
//! variance Gaussian likelihood. Prior `N(0, I)` regardless of `t`. The loss is
//! the negative ELBO averaged over samples, with one reparameterized draw per
//! sample and the KL term weighted by `kl_weight`.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{embed_backward, embed_samples, gat_backward, gat_forward_cached, ConfounderGraph, GatLayer};
use crate::rng::RngState;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Fully connected layer `y = W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((output, input)),
            b: Array1::zeros(output),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((output, input), |_| rng.random_range(-bound..bound)),
            b: Array1::zeros(output),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    fn input(&self) -> usize {
        self.w.ncols()
    }

    fn output(&self) -> usize {
        self.w.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaeModel {
    pub enc_hidden: Dense,
    pub enc_mu: Dense,
    pub enc_logvar: Dense,
    pub dec_hidden: Dense,
    pub dec_out: Dense,
}

impl CvaeModel {
    pub fn zeros(input_dim: usize, hidden_dim: usize, latent_dim: usize) -> Self {
        Self {
            enc_hidden: Dense::zeros(input_dim + 1, hidden_dim),
            enc_mu: Dense::zeros(hidden_dim, latent_dim),
            enc_logvar: Dense::zeros(hidden_dim, latent_dim),
            dec_hidden: Dense::zeros(latent_dim + 1, hidden_dim),
            dec_out: Dense::zeros(hidden_dim, input_dim),
        }
    }

    pub fn init(input_dim: usize, hidden_dim: usize, latent_dim: usize, rng: &RngState) -> Self {
        let mut r = rng.rng();
        Self {
            enc_hidden: Dense::glorot(input_dim + 1, hidden_dim, &mut r),
            enc_mu: Dense::glorot(hidden_dim, latent_dim, &mut r),
            enc_logvar: Dense::glorot(hidden_dim, latent_dim, &mut r),
            dec_hidden: Dense::glorot(latent_dim + 1, hidden_dim, &mut r),
            dec_out: Dense::glorot(hidden_dim, input_dim, &mut r),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dec_out.output()
    }

    pub fn hidden_dim(&self) -> usize {
        self.enc_hidden.output()
    }

    pub fn latent_dim(&self) -> usize {
        self.enc_mu.output()
    }

    fn check(&self) -> Result<()> {
        let (q, m, l) = (self.input_dim(), self.hidden_dim(), self.latent_dim());
        let dims = [
            ("encoder hidden input", self.enc_hidden.input(), q + 1),
            ("encoder mean input", self.enc_mu.input(), m),
            ("encoder logvar input", self.enc_logvar.input(), m),
            ("encoder logvar output", self.enc_logvar.output(), l),
            ("decoder hidden input", self.dec_hidden.input(), l + 1),
            ("decoder hidden output", self.dec_hidden.output(), m),
            ("decoder output input", self.dec_out.input(), m),
        ];
        for (what, got, expected) in dims {
            if got != expected {
                return Err(Error::shape(what, expected, got));
            }
        }
        Ok(())
    }

    /// Posterior mean and clamped log-variance for a batch (`n x q`).
    pub fn encode_batch(&self, x: &Array2<f64>, t: &[u8]) -> Result<(Array2<f64>, Array2<f64>)> {
        let u = self.encoder_input(x, t)?;
        let h = self.enc_hidden.forward(&u).mapv(f64::tanh);
        let mu = self.enc_mu.forward(&h);
        let lv = self.enc_logvar.forward(&h).mapv(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        Ok((mu, lv))
    }

    /// Reconstruction means for a batch of latent vectors (`n x l`).
    pub fn decode_batch(&self, z: &Array2<f64>, t: &[u8]) -> Result<Array2<f64>> {
        self.check()?;
        if z.ncols() != self.latent_dim() {
            return Err(Error::shape("latent width", self.latent_dim(), z.ncols()));
        }
        if t.len() != z.nrows() {
            return Err(Error::shape("treatment length", z.nrows(), t.len()));
        }
        let v = append_treatment(z, t);
        let g = self.dec_hidden.forward(&v).mapv(f64::tanh);
        Ok(self.dec_out.forward(&g))
    }

    /// Encodes one sample, drawing the reparameterization noise from `rng`.
    pub fn encode(&self, x: &[f64], t: u8, rng: &RngState) -> Result<LatentCode> {
        let mut r = rng.rng();
        let eps: Vec<f64> = (0..self.latent_dim()).map(|_| r.sample(StandardNormal)).collect();
        self.encode_with_noise(x, t, &eps)
    }

    pub fn encode_with_noise(&self, x: &[f64], t: u8, eps: &[f64]) -> Result<LatentCode> {
        if eps.len() != self.latent_dim() {
            return Err(Error::shape("noise length", self.latent_dim(), eps.len()));
        }
        let row = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("1 x q");
        let (mu, lv) = self.encode_batch(&row, &[t])?;
        Ok(LatentCode::new(mu.row(0).to_vec(), lv.row(0).to_vec(), eps))
    }

    pub fn decode(&self, z: &[f64], t: u8) -> Result<Vec<f64>> {
        let row = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("1 x l");
        Ok(self.decode_batch(&row, &[t])?.row(0).to_vec())
    }

    /// Negative ELBO (mean over rows) of reconstructing `target` from inputs
    /// `x`, `t` with reparameterization noise `eps`.
    pub fn elbo(
        &self,
        x: &Array2<f64>,
        t: &[u8],
        target: &Array2<f64>,
        eps: &Array2<f64>,
        kl_weight: f64,
    ) -> Result<ElboTerms> {
        let fwd = self.forward(x, t, eps)?;
        if target.dim() != fwd.recon.dim() {
            return Err(Error::shape(
                "reconstruction target",
                format!("{:?}", fwd.recon.dim()),
                format!("{:?}", target.dim()),
            ));
        }
        Ok(fwd.terms(target, kl_weight))
    }

    fn encoder_input(&self, x: &Array2<f64>, t: &[u8]) -> Result<Array2<f64>> {
        self.check()?;
        if x.ncols() != self.input_dim() {
            return Err(Error::shape("encoder input width", self.input_dim(), x.ncols()));
        }
        if t.len() != x.nrows() {
            return Err(Error::shape("treatment length", x.nrows(), t.len()));
        }
        Ok(append_treatment(x, t))
    }

    fn forward(&self, x: &Array2<f64>, t: &[u8], eps: &Array2<f64>) -> Result<CvaeForward> {
        let u = self.encoder_input(x, t)?;
        if eps.dim() != (x.nrows(), self.latent_dim()) {
            return Err(Error::shape(
                "noise",
                format!("({}, {})", x.nrows(), self.latent_dim()),
                format!("{:?}", eps.dim()),
            ));
        }
        let h = self.enc_hidden.forward(&u).mapv(f64::tanh);
        let mu = self.enc_mu.forward(&h);
        let lv_raw = self.enc_logvar.forward(&h);
        let lv = lv_raw.mapv(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        let sd = lv.mapv(|v| (0.5 * v).exp());
        let z = &mu + &(&sd * eps);
        let v = append_treatment(&z, t);
        let g = self.dec_hidden.forward(&v).mapv(f64::tanh);
        let recon = self.dec_out.forward(&g);
        Ok(CvaeForward {
            u,
            h,
            mu,
            lv_raw,
            lv,
            sd,
            v,
            g,
            recon,
        })
    }
}

fn append_treatment(x: &Array2<f64>, t: &[u8]) -> Array2<f64> {
    let col = Array2::from_shape_fn((x.nrows(), 1), |(i, _)| f64::from(t[i]));
    concatenate![Axis(1), x.view(), col.view()]
}

/// `KL(N(mu, diag(exp(logvar))) || N(0, I))`.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub z: Vec<f64>,
}

impl LatentCode {
    /// `z = mu + exp(logvar / 2) * eps`.
    pub fn new(mu: Vec<f64>, logvar: Vec<f64>, eps: &[f64]) -> Self {
        let z = mu
            .iter()
            .zip(&logvar)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        Self { mu, logvar, z }
    }
}

/// Stacks the `z` vectors of `codes` into an `n x l` matrix.
pub fn codes_matrix(codes: &[LatentCode]) -> Array2<f64> {
    let l = codes.first().map_or(0, |c| c.z.len());
    Array2::from_shape_fn((codes.len(), l), |(i, k)| codes[i].z[k])
}

/// Draws `count` extra posterior samples per code. Returns the samples and the
/// index of the code each one came from.
pub fn augment_codes(codes: &[LatentCode], count: usize, rng: &RngState) -> (Array2<f64>, Vec<usize>) {
    let l = codes.first().map_or(0, |c| c.mu.len());
    let mut r = rng.rng();
    let mut out = Array2::zeros((codes.len() * count, l));
    let mut source = Vec::with_capacity(codes.len() * count);
    for (i, c) in codes.iter().enumerate() {
        for k in 0..count {
            let row = i * count + k;
            for j in 0..l {
                let e: f64 = r.sample(StandardNormal);
                out[[row, j]] = c.mu[j] + (0.5 * c.logvar[j]).exp() * e;
            }
            source.push(i);
        }
    }
    (out, source)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    /// `recon + kl_weight * kl`, the minimized quantity.
    pub loss: f64,
    /// Mean `0.5 * ||target - decode(z, t)||^2` (constants dropped).
    pub recon: f64,
    pub kl: f64,
}

struct CvaeForward {
    u: Array2<f64>,
    h: Array2<f64>,
    mu: Array2<f64>,
    lv_raw: Array2<f64>,
    lv: Array2<f64>,
    sd: Array2<f64>,
    v: Array2<f64>,
    g: Array2<f64>,
    recon: Array2<f64>,
}

impl CvaeForward {
    fn terms(&self, target: &Array2<f64>, kl_weight: f64) -> ElboTerms {
        let n = self.recon.nrows() as f64;
        let recon = 0.5 * (&self.recon - target).mapv(|v| v * v).sum() / n;
        let kl = 0.5
            * self
                .mu
                .iter()
                .zip(self.lv.iter())
                .map(|(m, lv)| lv.exp() + m * m - 1.0 - lv)
                .sum::<f64>()
            / n;
        ElboTerms {
            loss: recon + kl_weight * kl,
            recon,
            kl,
        }
    }
}

/// Graph attention layer plus CVAE, the full trainable state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointModel {
    pub gat: GatLayer,
    pub cvae: CvaeModel,
}

/// Observed quantities the joint objective is evaluated on.
#[derive(Debug, Clone, Copy)]
pub struct JointInputs<'a> {
    pub graph: &'a ConfounderGraph,
    pub x: &'a Array2<f64>,
    pub t: &'a [u8],
}

impl JointModel {
    pub fn init(graph_feature_dim: usize, cfg: &TrainConfig, rng: &RngState) -> Self {
        Self {
            gat: GatLayer::init(graph_feature_dim, cfg.embed_dim, &rng.split("gat")),
            cvae: CvaeModel::init(cfg.embed_dim, cfg.hidden_dim, cfg.latent_dim, &rng.split("cvae")),
        }
    }

    /// Structure-aware sample representation `X H' / p`.
    pub fn embed(&self, inputs: JointInputs<'_>) -> Result<Array2<f64>> {
        let h = gat_forward_cached(inputs.graph, &self.gat)?.output;
        embed_samples(inputs.x, &h)
    }

    pub fn loss(&self, inputs: JointInputs<'_>, eps: &Array2<f64>, kl_weight: f64) -> Result<ElboTerms> {
        let xt = self.embed(inputs)?;
        self.cvae.elbo(&xt, inputs.t, &xt, eps, kl_weight)
    }

    /// Loss and its exact gradient with respect to every parameter. The
    /// reconstruction target is the embedding itself, so gradients flow into
    /// the attention layer through both the encoder input and the target.
    pub fn loss_and_grad(
        &self,
        inputs: JointInputs<'_>,
        eps: &Array2<f64>,
        kl_weight: f64,
    ) -> Result<(ElboTerms, JointModel)> {
        let gat_fwd = gat_forward_cached(inputs.graph, &self.gat)?;
        let xt = embed_samples(inputs.x, &gat_fwd.output)?;
        let m = &self.cvae;
        let f = m.forward(&xt, inputs.t, eps)?;
        let terms = f.terms(&xt, kl_weight);
        let n = xt.nrows() as f64;
        let l = m.latent_dim();
        let q = m.input_dim();

        let d_recon = (&f.recon - &xt) / n;
        let dec_out = Dense {
            w: d_recon.t().dot(&f.g),
            b: d_recon.sum_axis(Axis(0)),
        };
        let d_g = d_recon.dot(&m.dec_out.w);
        let d_a2 = &d_g * &f.g.mapv(|v| 1.0 - v * v);
        let dec_hidden = Dense {
            w: d_a2.t().dot(&f.v),
            b: d_a2.sum_axis(Axis(0)),
        };
        let d_v = d_a2.dot(&m.dec_hidden.w);
        let d_z = d_v.slice(s![.., ..l]).to_owned();

        let d_mu = &d_z + &(&f.mu * (kl_weight / n));
        let mut d_lv = Array2::zeros(f.lv.dim());
        for ((idx, out), &raw) in d_lv.indexed_iter_mut().zip(f.lv_raw.iter()) {
            if raw > LOGVAR_MIN && raw < LOGVAR_MAX {
                let (i, k) = idx;
                *out =
                    d_z[[i, k]] * eps[[i, k]] * f.sd[[i, k]] * 0.5 + kl_weight / n * 0.5 * (f.lv[[i, k]].exp() - 1.0);
            }
        }
        let enc_mu = Dense {
            w: d_mu.t().dot(&f.h),
            b: d_mu.sum_axis(Axis(0)),
        };
        let enc_logvar = Dense {
            w: d_lv.t().dot(&f.h),
            b: d_lv.sum_axis(Axis(0)),
        };
        let d_h = d_mu.dot(&m.enc_mu.w) + d_lv.dot(&m.enc_logvar.w);
        let d_a1 = &d_h * &f.h.mapv(|v| 1.0 - v * v);
        let enc_hidden = Dense {
            w: d_a1.t().dot(&f.u),
            b: d_a1.sum_axis(Axis(0)),
        };
        let d_u = d_a1.dot(&m.enc_hidden.w);
        let d_xt = &d_u.slice(s![.., ..q]) - &d_recon;

        let d_h_nodes = embed_backward(inputs.x, &d_xt);
        let gat_grads = gat_backward(inputs.graph, &self.gat, &gat_fwd, d_h_nodes.view())?;
        let grads = JointModel {
            gat: GatLayer {
                w: gat_grads.w,
                a: gat_grads.a,
                ..self.gat.clone()
            },
            cvae: CvaeModel {
                enc_hidden,
                enc_mu,
                enc_logvar,
                dec_hidden,
                dec_out,
            },
        };
        Ok((terms, grads))
    }

    /// All trainable parameters in a fixed order (row-major within each array).
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.gat.w.iter());
        out.extend(&self.gat.a);
        for d in self.cvae.layers() {
            out.extend(d.w.iter());
            out.extend(d.b.iter());
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) {
        let mut src = values.iter();
        let mut fill = |dst: &mut dyn Iterator<Item = &mut f64>| {
            for v in dst {
                *v = *src.next().expect("parameter vector too short");
            }
        };
        fill(&mut self.gat.w.iter_mut());
        fill(&mut self.gat.a.iter_mut());
        for d in self.cvae.layers_mut() {
            fill(&mut d.w.iter_mut());
            fill(&mut d.b.iter_mut());
        }
        assert!(src.next().is_none(), "parameter vector too long");
    }
}

impl CvaeModel {
    fn layers(&self) -> [&Dense; 5] {
        [
            &self.enc_hidden,
            &self.enc_mu,
            &self.enc_logvar,
            &self.dec_hidden,
            &self.dec_out,
        ]
    }

    fn layers_mut(&mut self) -> [&mut Dense; 5] {
        [
            &mut self.enc_hidden,
            &mut self.enc_mu,
            &mut self.enc_logvar,
            &mut self.dec_hidden,
            &mut self.dec_out,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// Output width of the attention layer, i.e. the CVAE input width.
    pub embed_dim: usize,
    /// Keep the attention layer at its initial parameters.
    pub freeze_gat: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            learning_rate: 1e-2,
            kl_weight: 1.0,
            latent_dim: 2,
            hidden_dim: 16,
            embed_dim: 8,
            freeze_gat: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Domain("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Domain("learning rate must be positive".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Domain("kl weight must be non-negative".into()));
        }
        if self.latent_dim == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Domain("network widths must be positive".into()));
        }
        Ok(())
    }
}

/// Reparameterization noise used at `epoch` (0-based).
pub fn epoch_noise(rng: &RngState, epoch: usize, n: usize, latent_dim: usize) -> Array2<f64> {
    let mut r = rng.split("eps").split(&epoch.to_string()).rng();
    Array2::from_shape_fn((n, latent_dim), |_| r.sample(StandardNormal))
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: JointModel,
    /// Posterior means (`z = mu`) from the final parameters.
    pub codes: Vec<LatentCode>,
    pub trace: Vec<ElboTerms>,
}

impl TrainOutput {
    pub fn codes_matrix(&self) -> Array2<f64> {
        codes_matrix(&self.codes)
    }
}

/// Encoder means averaged over both treatment values, so the code is a
/// function of the covariates alone.
pub fn treatment_marginal_codes(model: &JointModel, graph: &ConfounderGraph, x: &Array2<f64>) -> Result<Array2<f64>> {
    let n = x.nrows();
    let zeros = vec![0u8; n];
    let ones = vec![1u8; n];
    let xt = model.embed(JointInputs { graph, x, t: &zeros })?;
    let (mu0, _) = model.cvae.encode_batch(&xt, &zeros)?;
    let (mu1, _) = model.cvae.encode_batch(&xt, &ones)?;
    Ok((mu0 + mu1) * 0.5)
}

/// Initializes from `rng` and trains. See [`train_from`].
pub fn train(
    graph: &ConfounderGraph,
    x: &Array2<f64>,
    t: &[u8],
    cfg: &TrainConfig,
    rng: &RngState,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let model = JointModel::init(graph.feature_dim(), cfg, &rng.split("init"));
    train_from(model, graph, x, t, cfg, rng)
}

/// Full-batch fixed-step gradient descent on the mean negative ELBO.
/// `trace[e]` holds the loss evaluated before update `e`.
pub fn train_from(
    mut model: JointModel,
    graph: &ConfounderGraph,
    x: &Array2<f64>,
    t: &[u8],
    cfg: &TrainConfig,
    rng: &RngState,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let n = x.nrows();
    if n < 2 {
        return Err(Error::Domain(format!("need at least 2 samples to train, got {n}")));
    }
    let inputs = JointInputs { graph, x, t };
    let mut trace = Vec::with_capacity(cfg.epochs);
    let gat_len = model.gat.w.len() + model.gat.a.len();
    for epoch in 0..cfg.epochs {
        let eps = epoch_noise(rng, epoch, n, cfg.latent_dim);
        let (terms, grads) = model.loss_and_grad(inputs, &eps, cfg.kl_weight)?;
        if !terms.loss.is_finite() {
            let last = trace.last().map_or(f64::NAN, |t: &ElboTerms| t.loss);
            return Err(Error::Training {
                epoch,
                message: format!("loss is {} (previous epoch {last})", terms.loss),
            });
        }
        trace.push(terms);
        let mut params = model.params();
        let g = grads.params();
        let start = if cfg.freeze_gat { gat_len } else { 0 };
        for (p, d) in params.iter_mut().zip(&g).skip(start) {
            *p -= cfg.learning_rate * d;
        }
        model.set_params(&params);
    }
    let xt = model.embed(inputs)?;
    let (mu, lv) = model.cvae.encode_batch(&xt, t)?;
    let codes = (0..n)
        .map(|i| {
            let m = mu.row(i).to_vec();
            LatentCode {
                z: m.clone(),
                mu: m,
                logvar: lv.row(i).to_vec(),
            }
        })
        .collect();
    Ok(TrainOutput { model, codes, trace })
}

/// Central-difference step used by the gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with an absolute floor so that entries which are zero up to
/// rounding do not dominate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest elementwise relative error between the analytic gradient of the
/// joint objective and central finite differences, with the noise frozen.
pub fn grad_check(model: &JointModel, inputs: JointInputs<'_>, eps: &Array2<f64>, kl_weight: f64) -> Result<f64> {
    grad_check_with(model, inputs, eps, kl_weight, |_| {})
}

/// As [`grad_check`], but lets the caller tamper with the flattened analytic
/// gradient first.
pub fn grad_check_with(
    model: &JointModel,
    inputs: JointInputs<'_>,
    eps: &Array2<f64>,
    kl_weight: f64,
    tamper: impl FnOnce(&mut Vec<f64>),
) -> Result<f64> {
    let (_, grads) = model.loss_and_grad(inputs, eps, kl_weight)?;
    let mut analytic = grads.params();
    tamper(&mut analytic);
    let base = model.params();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (k, &a) in analytic.iter().enumerate() {
        let mut plus = base.clone();
        plus[k] += FD_STEP;
        probe.set_params(&plus);
        let lp = probe.loss(inputs, eps, kl_weight)?.loss;
        let mut minus = base.clone();
        minus[k] -= FD_STEP;
        probe.set_params(&minus);
        let lm = probe.loss(inputs, eps, kl_weight)?.loss;
        let numeric = (lp - lm) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ConfounderGraph;
    use ndarray::array;

    #[test]
    fn zero_network_encodes_to_noise() {
        let m = CvaeModel::zeros(3, 4, 2);
        let c = m.encode_with_noise(&[1.0, -2.0, 0.5], 1, &[0.3, -0.7]).unwrap();
        assert_eq!(c.mu, vec![0.0, 0.0]);
        assert_eq!(c.logvar, vec![0.0, 0.0]);
        assert_eq!(c.z, vec![0.3, -0.7]);
    }

    #[test]
    fn encode_is_deterministic_per_stream() {
        let m = CvaeModel::init(3, 4, 2, &RngState::new(1));
        let s = RngState::new(9).split("enc");
        assert_eq!(
            m.encode(&[0.1, 0.2, 0.3], 0, &s).unwrap(),
            m.encode(&[0.1, 0.2, 0.3], 0, &s).unwrap()
        );
    }

    #[test]
    fn logvar_is_clamped() {
        let mut m = CvaeModel::zeros(1, 1, 1);
        m.enc_logvar.b[0] = 50.0;
        let c = m.encode_with_noise(&[0.0], 0, &[0.0]).unwrap();
        assert_eq!(c.logvar, vec![LOGVAR_MAX]);
    }

    #[test]
    fn zero_decoder_outputs_zero() {
        let m = CvaeModel::zeros(3, 4, 2);
        assert_eq!(m.decode(&[1.0, 2.0], 1).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn decoder_depends_on_treatment() {
        let mut m = CvaeModel::zeros(1, 1, 1);
        m.dec_hidden.w[[0, 1]] = 0.5;
        m.dec_out.w[[0, 0]] = 1.0;
        assert_ne!(m.decode(&[0.2], 0).unwrap(), m.decode(&[0.2], 1).unwrap());
    }

    #[test]
    fn decoder_matches_hand_forward_pass() {
        let mut m = CvaeModel::zeros(2, 2, 1);
        m.dec_hidden.w = array![[0.1, -0.2], [0.3, 0.4]];
        m.dec_hidden.b = array![0.05, -0.05];
        m.dec_out.w = array![[1.0, -1.0], [0.5, 2.0]];
        m.dec_out.b = array![0.01, 0.02];
        let out = m.decode(&[0.7], 1).unwrap();
        let h0 = (0.1f64 * 0.7 - 0.2 + 0.05).tanh();
        let h1 = (0.3f64 * 0.7 + 0.4 - 0.05).tanh();
        let expect = [h0 - h1 + 0.01, 0.5 * h0 + 2.0 * h1 + 0.02];
        for (o, e) in out.iter().zip(expect) {
            assert!((o - e).abs() < 1e-15);
        }
    }

    #[test]
    fn decode_shape_error() {
        let m = CvaeModel::zeros(3, 4, 2);
        assert!(matches!(m.decode(&[1.0], 0), Err(Error::Shape(_))));
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(kl_divergence(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(kl_divergence(&[1.0, 0.0], &[0.0, 0.0]), 0.5);
    }

    fn tiny_instance(seed: u64) -> (ConfounderGraph, Array2<f64>, Vec<u8>, JointModel, Array2<f64>) {
        let mut r = RngState::new(seed).rng();
        let feats = Array2::from_shape_fn((4, 3), |_| r.random_range(-1.0..1.0));
        let g = ConfounderGraph::from_edges(feats, &[(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap();
        let x = Array2::from_shape_fn((5, 4), |_| r.random_range(-2.0..2.0));
        let t = vec![0, 1, 1, 0, 1];
        let cfg = TrainConfig {
            embed_dim: 3,
            hidden_dim: 4,
            latent_dim: 2,
            ..TrainConfig::default()
        };
        let model = JointModel::init(3, &cfg, &RngState::new(seed).split("m"));
        let eps = epoch_noise(&RngState::new(seed), 0, 5, 2);
        (g, x, t, model, eps)
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let (g, x, t, model, eps) = tiny_instance(3);
        let inputs = JointInputs {
            graph: &g,
            x: &x,
            t: &t,
        };
        assert!(grad_check(&model, inputs, &eps, 1.0).unwrap() < 1e-4);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let (g, x, t, model, eps) = tiny_instance(4);
        let inputs = JointInputs {
            graph: &g,
            x: &x,
            t: &t,
        };
        let err = grad_check_with(&model, inputs, &eps, 1.0, |grad| {
            let k = (0..grad.len())
                .max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs()))
                .unwrap();
            grad[k] *= 2.0;
        })
        .unwrap();
        assert!(err > 1e-2);
    }

    #[test]
    fn single_epoch_is_one_gradient_step() {
        let (g, x, t, model, _) = tiny_instance(5);
        let cfg = TrainConfig {
            epochs: 1,
            embed_dim: 3,
            hidden_dim: 4,
            latent_dim: 2,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let rng = RngState::new(77);
        let out = train_from(model.clone(), &g, &x, &t, &cfg, &rng).unwrap();
        let eps = epoch_noise(&rng, 0, 5, 2);
        let (_, grads) = model
            .loss_and_grad(
                JointInputs {
                    graph: &g,
                    x: &x,
                    t: &t,
                },
                &eps,
                1.0,
            )
            .unwrap();
        for ((after, before), d) in out.model.params().iter().zip(model.params()).zip(grads.params()) {
            assert!((before - after - 0.05 * d).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_epochs_rejected() {
        let (g, x, t, model, _) = tiny_instance(6);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(train_from(model, &g, &x, &t, &cfg, &RngState::new(0)).is_err());
    }

    #[test]
    fn params_round_trip() {
        let (_, _, _, model, _) = tiny_instance(7);
        let mut other = model.clone();
        other.set_params(&vec![0.0; model.params().len()]);
        other.set_params(&model.params());
        assert_eq!(other, model);
    }

    #[test]
    fn augmentation_draws_around_means() {
        let codes = vec![
            LatentCode::new(vec![0.0, 0.0], vec![-10.0, -10.0], &[0.0, 0.0]),
            LatentCode::new(vec![5.0, 5.0], vec![-10.0, -10.0], &[0.0, 0.0]),
        ];
        let (z, src) = augment_codes(&codes, 3, &RngState::new(1));
        assert_eq!(z.nrows(), 6);
        assert_eq!(src, vec![0, 0, 0, 1, 1, 1]);
        assert!((z[[4, 0]] - 5.0).abs() < 0.1);
    }
}
