//! Feed-forward variational autoencoder with an automatic relevance
//! determination prior on the latent coordinates.
//!
//! The network is a single-hidden-layer encoder and decoder with ReLU
//! activations. Each latent coordinate carries its own prior precision
//! `alpha`; precisions are re-estimated once per epoch from the posterior
//! second moments, which drives uninformative coordinates toward zero KL
//! and lets them be pruned by the `kl > tau` rule. Gradients are
//! hand-derived reverse mode and optimized with Adam.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_abt, matmul_atb, DataMatrix, RngStream};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Encoder log-variances are clamped to this magnitude before `exp`.
const LOG_VAR_LIMIT: f64 = 30.0;
/// Epoch loss must improve by more than this to reset the patience counter.
const IMPROVEMENT_TOL: f64 = 1e-6;
/// On-disk state format version.
const STATE_FORMAT_VERSION: u32 = 1;

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    pub latent: usize,
    pub learning_rate: f64,
    /// Weight on the KL term of the loss.
    pub beta: f64,
    /// Relevance threshold tau: keep latent coordinate l when `KL_l > tau`.
    pub kl_threshold: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Gamma hyperprior shape for the precisions.
    pub a0: f64,
    /// Gamma hyperprior rate for the precisions.
    pub b0: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            latent: 32,
            learning_rate: 1e-4,
            beta: 1.0,
            kl_threshold: 1.0,
            patience: 10,
            max_epochs: 500,
            batch_size: 64,
            a0: 1e-3,
            b0: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent < 1 || self.hidden < 1 {
            return Err(Error::InvalidConfig(
                "hidden and latent sizes must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(self.kl_threshold >= 0.0) {
            return Err(Error::InvalidConfig("kl_threshold must be >= 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.beta >= 0.0) || !(self.a0 >= 0.0) || !(self.b0 >= 0.0) {
            return Err(Error::InvalidConfig(
                "beta, a0, b0 must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// First and second Adam moment buffers, one pair per parameter tensor in
/// [`VaeState::PARAM_COUNT`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Encoder/decoder parameters, ARD precisions, and optimizer state.
///
/// Weight matrices are stored `(out x in)`, so a forward affine over a
/// batch `X (n x in)` is `X W^T + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeState {
    pub input: usize,
    pub hidden: usize,
    pub latent: usize,
    pub enc_w1: DataMatrix,
    pub enc_b1: Vec<f64>,
    pub enc_w_mu: DataMatrix,
    pub enc_b_mu: Vec<f64>,
    pub enc_w_lv: DataMatrix,
    pub enc_b_lv: Vec<f64>,
    pub dec_w1: DataMatrix,
    pub dec_b1: Vec<f64>,
    pub dec_w2: DataMatrix,
    pub dec_b2: Vec<f64>,
    /// ARD precision per latent coordinate, all positive.
    pub alpha: Vec<f64>,
    pub moments: AdamMoments,
    pub step_count: u64,
}

/// Gradients of the loss with respect to every parameter tensor.
#[derive(Debug, Clone)]
pub struct VaeGradients {
    pub enc_w1: DataMatrix,
    pub enc_b1: Vec<f64>,
    pub enc_w_mu: DataMatrix,
    pub enc_b_mu: Vec<f64>,
    pub enc_w_lv: DataMatrix,
    pub enc_b_lv: Vec<f64>,
    pub dec_w1: DataMatrix,
    pub dec_b1: Vec<f64>,
    pub dec_w2: DataMatrix,
    pub dec_b2: Vec<f64>,
}

impl VaeState {
    pub const PARAM_COUNT: usize = 10;

    /// Mutable views of the parameter tensors, in fixed order (paired with
    /// the moment buffers and gradient slices).
    pub fn param_slices_mut(&mut self) -> [&mut [f64]; Self::PARAM_COUNT] {
        [
            self.enc_w1.values_mut(),
            &mut self.enc_b1,
            self.enc_w_mu.values_mut(),
            &mut self.enc_b_mu,
            self.enc_w_lv.values_mut(),
            &mut self.enc_b_lv,
            self.dec_w1.values_mut(),
            &mut self.dec_b1,
            self.dec_w2.values_mut(),
            &mut self.dec_b2,
        ]
    }

    pub fn param_slices(&self) -> [&[f64]; Self::PARAM_COUNT] {
        [
            self.enc_w1.values(),
            &self.enc_b1,
            self.enc_w_mu.values(),
            &self.enc_b_mu,
            self.enc_w_lv.values(),
            &self.enc_b_lv,
            self.dec_w1.values(),
            &self.dec_b1,
            self.dec_w2.values(),
            &self.dec_b2,
        ]
    }
}

impl VaeGradients {
    fn zeros_like(state: &VaeState) -> Self {
        Self {
            enc_w1: DataMatrix::zeros(state.hidden, state.input),
            enc_b1: vec![0.0; state.hidden],
            enc_w_mu: DataMatrix::zeros(state.latent, state.hidden),
            enc_b_mu: vec![0.0; state.latent],
            enc_w_lv: DataMatrix::zeros(state.latent, state.hidden),
            enc_b_lv: vec![0.0; state.latent],
            dec_w1: DataMatrix::zeros(state.hidden, state.latent),
            dec_b1: vec![0.0; state.hidden],
            dec_w2: DataMatrix::zeros(state.input, state.hidden),
            dec_b2: vec![0.0; state.input],
        }
    }

    pub fn slices(&self) -> [&[f64]; VaeState::PARAM_COUNT] {
        [
            self.enc_w1.values(),
            &self.enc_b1,
            self.enc_w_mu.values(),
            &self.enc_b_mu,
            self.enc_w_lv.values(),
            &self.enc_b_lv,
            self.dec_w1.values(),
            &self.dec_b1,
            self.dec_w2.values(),
            &self.dec_b2,
        ]
    }
}

/// Posterior summary over a dataset, restricted to the relevant set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatentSummary {
    /// Posterior means, `n x latent`.
    pub mu: DataMatrix,
    /// Posterior log-variances, `n x latent`.
    pub log_var: DataMatrix,
    /// Sorted indices of the retained latent coordinates (never empty).
    pub relevant: Vec<usize>,
    /// Mean KL per latent coordinate used for the selection.
    pub kl_means: Vec<f64>,
    /// `mu` restricted to the relevant columns, `n x d_eff`.
    pub mu_star: DataMatrix,
}

impl LatentSummary {
    pub fn d_eff(&self) -> usize {
        self.relevant.len()
    }
}

fn glorot_fill(w: &mut DataMatrix, fan_in: usize, fan_out: usize, rng: &mut RngStream) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in w.values_mut() {
        *v = rng.uniform_in(-bound, bound);
    }
}

/// Glorot-uniform weights, zero biases, unit precisions, zero moments.
pub fn init(cfg: &TrainConfig, input: usize, rng: &mut RngStream) -> Result<VaeState> {
    cfg.validate()?;
    if input < 1 {
        return Err(Error::DegenerateInput("input dimension must be >= 1".into()));
    }
    let (h, d) = (cfg.hidden, cfg.latent);
    let mut state = VaeState {
        input,
        hidden: h,
        latent: d,
        enc_w1: DataMatrix::zeros(h, input),
        enc_b1: vec![0.0; h],
        enc_w_mu: DataMatrix::zeros(d, h),
        enc_b_mu: vec![0.0; d],
        enc_w_lv: DataMatrix::zeros(d, h),
        enc_b_lv: vec![0.0; d],
        dec_w1: DataMatrix::zeros(h, d),
        dec_b1: vec![0.0; h],
        dec_w2: DataMatrix::zeros(input, h),
        dec_b2: vec![0.0; input],
        alpha: vec![1.0; d],
        moments: AdamMoments { m: vec![], v: vec![] },
        step_count: 0,
    };
    glorot_fill(&mut state.enc_w1, input, h, rng);
    glorot_fill(&mut state.enc_w_mu, h, d, rng);
    glorot_fill(&mut state.enc_w_lv, h, d, rng);
    glorot_fill(&mut state.dec_w1, d, h, rng);
    glorot_fill(&mut state.dec_w2, h, input, rng);
    let shapes: Vec<usize> = state.param_slices().iter().map(|s| s.len()).collect();
    state.moments = AdamMoments {
        m: shapes.iter().map(|&len| vec![0.0; len]).collect(),
        v: shapes.iter().map(|&len| vec![0.0; len]).collect(),
    };
    Ok(state)
}

/// `X W^T + b` over a batch.
fn affine(x: &DataMatrix, w: &DataMatrix, b: &[f64]) -> DataMatrix {
    let mut out = matmul_abt(x, w);
    for r in 0..out.rows() {
        for (o, bias) in out.row_mut(r).iter_mut().zip(b) {
            *o += bias;
        }
    }
    out
}

fn relu(x: &DataMatrix) -> DataMatrix {
    let mut out = x.clone();
    for v in out.values_mut() {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
    out
}

fn column_sums(x: &DataMatrix) -> Vec<f64> {
    let mut out = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (o, v) in out.iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    out
}

/// Posterior parameters `(mu, log_var)` for every row of `x`.
///
/// Log-variances are clamped to `±30` before any `exp`.
pub fn encode(state: &VaeState, x: &DataMatrix) -> Result<(DataMatrix, DataMatrix)> {
    if x.cols() != state.input {
        return Err(Error::DegenerateInput(format!(
            "encode expects {} columns, got {}",
            state.input,
            x.cols()
        )));
    }
    let h = relu(&affine(x, &state.enc_w1, &state.enc_b1));
    let mu = affine(&h, &state.enc_w_mu, &state.enc_b_mu);
    let mut log_var = affine(&h, &state.enc_w_lv, &state.enc_b_lv);
    for v in log_var.values_mut() {
        *v = v.clamp(-LOG_VAR_LIMIT, LOG_VAR_LIMIT);
    }
    if !mu.is_finite() || !log_var.is_finite() {
        return Err(Error::NumericalOverflow("encode"));
    }
    Ok((mu, log_var))
}

/// Reconstructions for every latent row of `z`.
pub fn decode(state: &VaeState, z: &DataMatrix) -> Result<DataMatrix> {
    if z.cols() != state.latent {
        return Err(Error::DegenerateInput(format!(
            "decode expects {} columns, got {}",
            state.latent,
            z.cols()
        )));
    }
    let hd = relu(&affine(z, &state.dec_w1, &state.dec_b1));
    let recon = affine(&hd, &state.dec_w2, &state.dec_b2);
    if !recon.is_finite() {
        return Err(Error::NumericalOverflow("decode"));
    }
    Ok(recon)
}

/// `z = mu + exp(log_var / 2) * eps` with fresh standard-normal noise.
pub fn reparameterize(mu: &DataMatrix, log_var: &DataMatrix, rng: &mut RngStream) -> DataMatrix {
    let mut eps = DataMatrix::zeros(mu.rows(), mu.cols());
    rng.fill_normal(eps.values_mut());
    reparameterize_with_noise(mu, log_var, &eps)
}

fn reparameterize_with_noise(mu: &DataMatrix, log_var: &DataMatrix, eps: &DataMatrix) -> DataMatrix {
    assert_eq!(mu.rows(), log_var.rows());
    assert_eq!(mu.cols(), log_var.cols());
    let mut z = mu.clone();
    for ((zv, lv), ev) in z
        .values_mut()
        .iter_mut()
        .zip(log_var.values())
        .zip(eps.values())
    {
        *zv += (0.5 * lv).exp() * ev;
    }
    z
}

/// Per-observation, per-coordinate KL between the diagonal Gaussian
/// posterior and the `N(0, 1/alpha_l)` prior:
/// `0.5 * (alpha * (mu^2 + sigma^2) - 1 - ln(alpha) - ln(sigma^2))`.
pub fn kl_per_dimension(mu: &DataMatrix, log_var: &DataMatrix, alpha: &[f64]) -> DataMatrix {
    let (n, d) = (mu.rows(), mu.cols());
    let mut out = DataMatrix::zeros(n, d);
    for r in 0..n {
        let mu_row = mu.row(r);
        let lv_row = log_var.row(r);
        let out_row = out.row_mut(r);
        for l in 0..d {
            let sigma2 = lv_row[l].exp();
            out_row[l] =
                0.5 * (alpha[l] * (mu_row[l] * mu_row[l] + sigma2) - 1.0 - alpha[l].ln() - lv_row[l]);
        }
    }
    out
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    x: DataMatrix,
    enc_pre: DataMatrix,
    h: DataMatrix,
    mu: DataMatrix,
    /// Pre-clamp log-variances; the clamp gradient mask derives from these.
    log_var_raw: DataMatrix,
    log_var: DataMatrix,
    eps: DataMatrix,
    z: DataMatrix,
    dec_pre: DataMatrix,
    hd: DataMatrix,
    recon: DataMatrix,
    beta: f64,
}

/// Loss over a batch with fresh reparameterization noise.
///
/// `loss = mean_i [ 0.5 * ||x_i - recon_i||^2 + beta * sum_l KL_il ]`.
pub fn elbo_loss(
    state: &VaeState,
    x_batch: &DataMatrix,
    beta: f64,
    rng: &mut RngStream,
) -> Result<(f64, ForwardCache)> {
    let mut eps = DataMatrix::zeros(x_batch.rows(), state.latent);
    rng.fill_normal(eps.values_mut());
    elbo_loss_with_noise(state, x_batch, beta, eps)
}

/// Loss over a batch with caller-supplied noise; deterministic in all
/// arguments, which is what finite-difference checks need.
pub fn elbo_loss_with_noise(
    state: &VaeState,
    x_batch: &DataMatrix,
    beta: f64,
    eps: DataMatrix,
) -> Result<(f64, ForwardCache)> {
    let n = x_batch.rows();
    let enc_pre = affine(x_batch, &state.enc_w1, &state.enc_b1);
    let h = relu(&enc_pre);
    let mu = affine(&h, &state.enc_w_mu, &state.enc_b_mu);
    let log_var_raw = affine(&h, &state.enc_w_lv, &state.enc_b_lv);
    let mut log_var = log_var_raw.clone();
    for v in log_var.values_mut() {
        *v = v.clamp(-LOG_VAR_LIMIT, LOG_VAR_LIMIT);
    }
    let z = reparameterize_with_noise(&mu, &log_var, &eps);
    let dec_pre = affine(&z, &state.dec_w1, &state.dec_b1);
    let hd = relu(&dec_pre);
    let recon = affine(&hd, &state.dec_w2, &state.dec_b2);

    let kl = kl_per_dimension(&mu, &log_var, &state.alpha);
    let mut total = 0.0;
    for r in 0..n {
        let mut recon_err = 0.0;
        for (xv, rv) in x_batch.row(r).iter().zip(recon.row(r)) {
            let diff = xv - rv;
            recon_err += diff * diff;
        }
        total += 0.5 * recon_err + beta * kl.row(r).iter().sum::<f64>();
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NumericalOverflow("elbo_loss"));
    }
    Ok((
        loss,
        ForwardCache {
            x: x_batch.clone(),
            enc_pre,
            h,
            mu,
            log_var_raw,
            log_var,
            eps,
            z,
            dec_pre,
            hd,
            recon,
            beta,
        },
    ))
}

/// Exact reverse-mode gradients of [`elbo_loss`] for the cached forward
/// pass, treating the noise and the precisions as constants.
pub fn backprop(state: &VaeState, cache: &ForwardCache) -> VaeGradients {
    let n = cache.x.rows();
    let scale = 1.0 / n as f64;
    let mut grads = VaeGradients::zeros_like(state);

    // d loss / d recon = (recon - x) / n
    let mut d_recon = cache.recon.clone();
    for (dv, xv) in d_recon.values_mut().iter_mut().zip(cache.x.values()) {
        *dv = (*dv - xv) * scale;
    }

    grads.dec_w2 = matmul_atb(&d_recon, &cache.hd);
    grads.dec_b2 = column_sums(&d_recon);

    let mut d_dec_pre = matmul(&d_recon, &state.dec_w2);
    for (dv, pre) in d_dec_pre.values_mut().iter_mut().zip(cache.dec_pre.values()) {
        if *pre <= 0.0 {
            *dv = 0.0;
        }
    }
    grads.dec_w1 = matmul_atb(&d_dec_pre, &cache.z);
    grads.dec_b1 = column_sums(&d_dec_pre);

    let d_z = matmul(&d_dec_pre, &state.dec_w1);

    // mu and log_var receive the reconstruction path through z plus the
    // KL path; the clamp zeroes log_var gradients outside the limits.
    let mut d_mu = d_z.clone();
    let mut d_lv = DataMatrix::zeros(n, state.latent);
    let kl_scale = cache.beta * scale;
    for r in 0..n {
        let mu_row = cache.mu.row(r);
        let lv_row = cache.log_var.row(r);
        let raw_row = cache.log_var_raw.row(r);
        let eps_row = cache.eps.row(r);
        let dz_row = d_z.row(r);
        let d_mu_row = d_mu.row_mut(r);
        for l in 0..state.latent {
            d_mu_row[l] += kl_scale * state.alpha[l] * mu_row[l];
            let sigma2 = lv_row[l].exp();
            let mut g = dz_row[l] * eps_row[l] * 0.5 * sigma2.sqrt()
                + kl_scale * 0.5 * (state.alpha[l] * sigma2 - 1.0);
            if raw_row[l].abs() > LOG_VAR_LIMIT {
                g = 0.0;
            }
            d_lv.set(r, l, g);
        }
    }

    grads.enc_w_mu = matmul_atb(&d_mu, &cache.h);
    grads.enc_b_mu = column_sums(&d_mu);
    grads.enc_w_lv = matmul_atb(&d_lv, &cache.h);
    grads.enc_b_lv = column_sums(&d_lv);

    let mut d_h = matmul(&d_mu, &state.enc_w_mu);
    let d_h_lv = matmul(&d_lv, &state.enc_w_lv);
    for (a, b) in d_h.values_mut().iter_mut().zip(d_h_lv.values()) {
        *a += b;
    }
    for (dv, pre) in d_h.values_mut().iter_mut().zip(cache.enc_pre.values()) {
        if *pre <= 0.0 {
            *dv = 0.0;
        }
    }
    grads.enc_w1 = matmul_atb(&d_h, &cache.x);
    grads.enc_b1 = column_sums(&d_h);

    grads
}

/// One Adam update; increments the step counter.
pub fn adam_step(state: &mut VaeState, grads: &VaeGradients, learning_rate: f64) {
    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - ADAM_BETA1.powi(t);
    let bias2 = 1.0 - ADAM_BETA2.powi(t);
    let grad_slices = grads.slices();
    let mut moments = std::mem::replace(&mut state.moments, AdamMoments { m: vec![], v: vec![] });
    {
        let params = state.param_slices_mut();
        for (idx, param) in params.into_iter().enumerate() {
            let g = grad_slices[idx];
            let m = &mut moments.m[idx];
            let v = &mut moments.v[idx];
            for i in 0..param.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                param[i] -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
    state.moments = moments;
}

/// Empirical-Bayes precision update:
/// `alpha_l = (a0 + n/2) / (b0 + 0.5 * sum_i (mu_il^2 + sigma_il^2))`.
pub fn update_precisions(mu: &DataMatrix, log_var: &DataMatrix, a0: f64, b0: f64) -> Vec<f64> {
    let (n, d) = (mu.rows(), mu.cols());
    let mut second_moments = vec![0.0; d];
    for r in 0..n {
        let mu_row = mu.row(r);
        let lv_row = log_var.row(r);
        for l in 0..d {
            second_moments[l] += mu_row[l] * mu_row[l] + lv_row[l].exp();
        }
    }
    second_moments
        .iter()
        .map(|&s| (a0 + n as f64 / 2.0) / (b0 + 0.5 * s))
        .collect()
}

fn run_epochs(
    state: &mut VaeState,
    x: &DataMatrix,
    cfg: &TrainConfig,
    max_epochs: usize,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let n = x.rows();
    let mut history = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..max_epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select_rows(chunk);
            let (loss, cache) = elbo_loss(state, &xb, cfg.beta, rng)
                .map_err(|_| Error::TrainingDiverged { epoch })?;
            let grads = backprop(state, &cache);
            adam_step(state, &grads, cfg.learning_rate);
            loss_sum += loss * chunk.len() as f64;
        }
        let (mu, lv) = encode(state, x).map_err(|_| Error::TrainingDiverged { epoch })?;
        state.alpha = update_precisions(&mu, &lv, cfg.a0, cfg.b0);
        let epoch_loss = loss_sum / n as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        history.push(epoch_loss);
        if epoch_loss < best - IMPROVEMENT_TOL {
            best = epoch_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(history)
}

/// Shuffled mini-batch Adam training with per-epoch precision updates and
/// patience-based early stopping. Returns the trained state, the pruned
/// latent summary over `x`, and per-epoch mean losses.
pub fn train(
    mut state: VaeState,
    x: &DataMatrix,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<(VaeState, LatentSummary, Vec<f64>)> {
    cfg.validate()?;
    if cfg.batch_size > x.rows() {
        return Err(Error::InvalidConfig(format!(
            "batch_size {} exceeds sample size {}",
            cfg.batch_size,
            x.rows()
        )));
    }
    let history = run_epochs(&mut state, x, cfg, cfg.max_epochs, rng)?;
    let summary = select_relevant(&state, x, cfg.kl_threshold)?;
    Ok((state, summary, history))
}

/// Builds the latent summary for a fixed relevant set.
pub fn summarize_with_relevant(
    state: &VaeState,
    x: &DataMatrix,
    relevant: &[usize],
) -> Result<LatentSummary> {
    let (mu, log_var) = encode(state, x)?;
    let kl = kl_per_dimension(&mu, &log_var, &state.alpha);
    let kl_means = column_means(&kl);
    let mu_star = mu.select_cols(relevant);
    Ok(LatentSummary {
        mu,
        log_var,
        relevant: relevant.to_vec(),
        kl_means,
        mu_star,
    })
}

fn column_means(x: &DataMatrix) -> Vec<f64> {
    let mut out = column_sums(x);
    let n = x.rows() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Applies the relevance rule `KL_l > tau` over the mean per-coordinate
/// KL. When no coordinate passes, the single highest-KL coordinate is
/// kept so downstream statistics stay defined.
pub fn select_relevant(state: &VaeState, x: &DataMatrix, tau: f64) -> Result<LatentSummary> {
    let (mu, log_var) = encode(state, x)?;
    let kl = kl_per_dimension(&mu, &log_var, &state.alpha);
    let kl_means = column_means(&kl);
    let mut relevant: Vec<usize> = (0..state.latent).filter(|&l| kl_means[l] > tau).collect();
    if relevant.is_empty() {
        let argmax = kl_means
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite KL"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        relevant = vec![argmax];
    }
    let mu_star = mu.select_cols(&relevant);
    Ok(LatentSummary {
        mu,
        log_var,
        relevant,
        kl_means,
        mu_star,
    })
}

/// Exact Jacobian of the decoder at a latent point (`p x latent`); the
/// ReLU subgradient at zero is taken as zero.
pub fn decoder_jacobian(state: &VaeState, latent_point: &[f64]) -> DataMatrix {
    assert_eq!(latent_point.len(), state.latent, "latent point length");
    let h = state.hidden;
    // Active hidden units at this point.
    let mut active = vec![false; h];
    for i in 0..h {
        let pre = crate::numerics::dot(state.dec_w1.row(i), latent_point) + state.dec_b1[i];
        active[i] = pre > 0.0;
    }
    let mut jac = DataMatrix::zeros(state.input, state.latent);
    for out_idx in 0..state.input {
        let w2_row = state.dec_w2.row(out_idx);
        let jac_row = jac.row_mut(out_idx);
        for (i, &is_active) in active.iter().enumerate() {
            if !is_active {
                continue;
            }
            let w2_oi = w2_row[i];
            for (j, w1_ij) in state.dec_w1.row(i).iter().enumerate() {
                jac_row[j] += w2_oi * w1_ij;
            }
        }
    }
    jac
}

/// Euclidean norm of each Jacobian column; a per-axis sensitivity
/// diagnostic.
pub fn jacobian_column_norms(state: &VaeState, latent_point: &[f64]) -> Vec<f64> {
    let jac = decoder_jacobian(state, latent_point);
    (0..jac.cols())
        .map(|c| (0..jac.rows()).map(|r| jac.get(r, c).powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// Result of the warm-started refinement pass.
#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub state: VaeState,
    /// Summary over the refinement subset under the returned state.
    pub summary: LatentSummary,
    pub loss_history: Vec<f64>,
    /// True when the relevant set did not change and the pre-refinement
    /// state was restored.
    pub restored: bool,
}

/// Continues Adam from the given state (parameters, moments, and step
/// counter) on the retained subset, then re-applies the relevance rule.
/// If the relevant set comes back equal to `prior_relevant`, the input
/// state is returned untouched; otherwise the refined state and the new
/// set are kept.
pub fn refine(
    state: &VaeState,
    x_in: &DataMatrix,
    prior_relevant: &[usize],
    cfg: &TrainConfig,
    refine_epochs: Option<usize>,
    rng: &mut RngStream,
) -> Result<RefineOutcome> {
    if x_in.rows() == 0 {
        return Err(Error::DegenerateInput("refinement subset is empty".into()));
    }
    let mut refined = state.clone();
    let max_epochs = refine_epochs.unwrap_or(cfg.max_epochs);
    let mut batch_cfg = cfg.clone();
    batch_cfg.batch_size = cfg.batch_size.min(x_in.rows());
    let loss_history = run_epochs(&mut refined, x_in, &batch_cfg, max_epochs, rng)?;
    let summary = select_relevant(&refined, x_in, cfg.kl_threshold)?;
    if summary.relevant == prior_relevant {
        let summary = summarize_with_relevant(state, x_in, prior_relevant)?;
        Ok(RefineOutcome {
            state: state.clone(),
            summary,
            loss_history,
            restored: true,
        })
    } else {
        Ok(RefineOutcome {
            state: refined,
            summary,
            loss_history,
            restored: false,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct StateEnvelope {
    format_version: u32,
    state: VaeState,
}

/// Writes the state as versioned JSON; round-trips bit-exactly.
pub fn save_state<W: Write>(state: &VaeState, writer: W) -> Result<()> {
    let envelope = StateEnvelope {
        format_version: STATE_FORMAT_VERSION,
        state: state.clone(),
    };
    serde_json::to_writer(writer, &envelope)
        .map_err(|e| Error::Pipeline(format!("state serialization: {e}")))
}

pub fn load_state<R: Read>(reader: R) -> Result<VaeState> {
    let envelope: StateEnvelope = serde_json::from_reader(reader)
        .map_err(|e| Error::Pipeline(format!("state deserialization: {e}")))?;
    if envelope.format_version != STATE_FORMAT_VERSION {
        return Err(Error::Pipeline(format!(
            "unsupported state format version {}",
            envelope.format_version
        )));
    }
    Ok(envelope.state)
}
