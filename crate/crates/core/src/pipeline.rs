//! End-to-end retrospective detection: train the ARD-VAE, flag
//! provisional outliers with the changepoint and ensemble filters,
//! refine on the retained subset, estimate the in-control baseline, and
//! emit 2-of-4 consensus labels.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::ardvae::{self, LatentSummary, TrainConfig, VaeState};
use crate::changepoint::{self, PeltConfig, Segmentation};
use crate::detectors::{
    self, cap_contamination, factor_covariance, identity_self_map, percentile_ranks,
    ConsensusRule, DetectorKind, EnsembleConfig,
};
use crate::error::{Error, Result};
use crate::numerics::{
    covariance_matrix, empirical_quantile, Cholesky, DataMatrix, RngStream,
};

/// Minimum sample size the pipeline accepts.
const MIN_OBSERVATIONS: usize = 20;
/// Below `5 * d_eff` inliers the T² threshold falls back to the
/// theoretical chi-square quantile.
const T2_EMPIRICAL_MIN_RATIO: usize = 5;

// Substream tags for the pipeline's deterministic rng forks.
const TAG_TRAIN: u64 = 1;
const TAG_REFINE: u64 = 2;
const TAG_ENSEMBLE_PROVISIONAL: u64 = 3;
const TAG_ENSEMBLE_FINAL: u64 = 4;

/// Full pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub ensemble: EnsembleConfig,
    pub pelt: PeltConfig,
    /// Nominal level of the latent T² indicator.
    pub alpha_t2: f64,
    /// Nominal level of the reconstruction-error indicator.
    pub alpha_rec: f64,
    /// Epoch budget for refinement; `None` reuses the training regime.
    pub refine_epochs: Option<usize>,
    /// When set, overrides `alpha_t2`, `alpha_rec`, and the per-detector
    /// level via the 2-of-4 calibration algebra.
    pub alpha_global: Option<f64>,
    /// Re-run the changepoint filter on the refined latents for the final
    /// `c` indicator instead of reusing the provisional segmentation.
    pub recompute_changepoints: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            ensemble: EnsembleConfig::default(),
            pelt: PeltConfig::default(),
            alpha_t2: 0.05,
            alpha_rec: 0.05,
            refine_epochs: None,
            alpha_global: None,
            recompute_changepoints: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.ensemble.validate()?;
        self.pelt.validate()?;
        for (name, a) in [("alpha_t2", self.alpha_t2), ("alpha_rec", self.alpha_rec)] {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must lie in (0, 1), got {a}"
                )));
            }
        }
        if let Some(ag) = self.alpha_global {
            if !(ag > 0.0 && ag < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "alpha_global must lie in (0, 1), got {ag}"
                )));
            }
        }
        Ok(())
    }
}

/// The four final indicators, the provisional mask, consensus labels,
/// and the continuous anomaly score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlagSet {
    /// Changepoint indicator `c`.
    pub changepoint: Vec<bool>,
    /// Ensemble indicator `e`.
    pub ensemble: Vec<bool>,
    /// Latent T² exceedance `u`.
    pub t2: Vec<bool>,
    /// Reconstruction-error exceedance `q`.
    pub reconstruction: Vec<bool>,
    /// Provisional inlier mask `m` (true = retained for refinement).
    pub provisional_mask: Vec<bool>,
    /// Final 2-of-4 consensus labels.
    pub labels: Vec<bool>,
    /// `c + e + rank(T²) + rank(r)` in `[0, 4]`.
    pub anomaly_score: Vec<f64>,
}

/// In-control baseline statistics from the refined inliers.
#[derive(Debug, Clone)]
pub struct IcBaseline {
    pub mean: Vec<f64>,
    pub covariance: DataMatrix,
    /// T² threshold `h`.
    pub t2_threshold: f64,
    /// Reconstruction cutoff `q_alpha`; filled by the pipeline.
    pub recon_cutoff: Option<f64>,
    pub n_in: usize,
    /// Whether the covariance needed the ridge.
    pub ridged: bool,
    chol: Cholesky,
}

/// Per-run reporting: losses, selection state, filter behavior, and the
/// per-observation statistics behind the indicators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub train_loss: Vec<f64>,
    pub refine_loss: Vec<f64>,
    pub d_eff_initial: usize,
    pub d_eff_final: usize,
    pub relevant_initial: Vec<usize>,
    pub relevant_final: Vec<usize>,
    pub refine_restored: bool,
    /// Earliest changepoint governing the `c` indicator, if any.
    pub tau_star: Option<usize>,
    pub provisional_changepoint: Vec<bool>,
    pub provisional_ensemble: Vec<bool>,
    pub n_in: usize,
    pub per_detector_provisional: Vec<(String, usize)>,
    pub per_detector_final: Vec<(String, usize)>,
    pub t2_values: Vec<f64>,
    pub recon_errors: Vec<f64>,
    /// Decoder sensitivity per latent axis at the mean latent point.
    pub jacobian_column_norms: Vec<f64>,
    pub calibration: Option<CalibrationInfo>,
}

/// Calibration outcome when `alpha_global` is set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationInfo {
    pub alpha_global: f64,
    pub alpha_base: f64,
    pub alpha_ens: f64,
    /// Per-detector level in the provisional and final stages (they can
    /// differ when the boxplot rule joins only one of them).
    pub alpha0_provisional: f64,
    pub alpha0_final: f64,
    /// The changepoint filter is left at its configured penalty: the
    /// objective has no documented mapping from a false-alarm level to
    /// the penalty.
    pub note: String,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct VscoutOutput {
    pub flags: FlagSet,
    pub baseline: IcBaseline,
    /// Latent summary of the full sample under the final state.
    pub latent: LatentSummary,
    pub segmentation: Segmentation,
    pub diagnostics: Diagnostics,
    pub state: VaeState,
}

/// Mean, covariance (ridged when needed), and the T² threshold from the
/// refined inlier latents. The threshold is the empirical
/// `(1 - alpha_t2)` quantile of the inlier T² values, or the
/// chi-square quantile when fewer than `5 * d_eff` inliers are
/// available.
pub fn estimate_ic_stats(z_in: &DataMatrix, alpha_t2: f64) -> Result<IcBaseline> {
    let n_in = z_in.rows();
    if n_in < 3 {
        return Err(Error::DegenerateInput(format!(
            "in-control statistics need at least 3 inliers, got {n_in}"
        )));
    }
    if !(alpha_t2 > 0.0 && alpha_t2 < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha_t2 must lie in (0, 1), got {alpha_t2}"
        )));
    }
    let mean = z_in.col_means();
    let covariance = covariance_matrix(z_in)?;
    let (chol, ridged) = factor_covariance(&covariance)?;
    let d_eff = z_in.cols();
    let mut baseline = IcBaseline {
        mean,
        covariance,
        t2_threshold: 0.0,
        recon_cutoff: None,
        n_in,
        ridged,
        chol,
    };
    let t2_in: Vec<f64> = (0..n_in).map(|i| hotelling_t2(z_in.row(i), &baseline)).collect();
    baseline.t2_threshold = if n_in < T2_EMPIRICAL_MIN_RATIO * d_eff {
        chi_square_quantile(d_eff, 1.0 - alpha_t2)?
    } else {
        empirical_quantile(&t2_in, 1.0 - alpha_t2)?
    };
    Ok(baseline)
}

/// Chi-square quantile by bisection on the CDF (the library inverse is
/// only ~1e-4 accurate).
fn chi_square_quantile(dof: usize, p: f64) -> Result<f64> {
    let dist = ChiSquared::new(dof as f64)
        .map_err(|e| Error::Pipeline(format!("chi-square threshold: {e}")))?;
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    while dist.cdf(hi) < p {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::Pipeline("chi-square quantile did not bracket".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if dist.cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-10 * (1.0 + hi) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Quadratic form `(z - mean)^T Sigma^{-1} (z - mean)` via the stored
/// Cholesky factor.
pub fn hotelling_t2(z_row: &[f64], baseline: &IcBaseline) -> f64 {
    let centered: Vec<f64> = z_row
        .iter()
        .zip(&baseline.mean)
        .map(|(z, m)| z - m)
        .collect();
    let solved = baseline.chol.solve(&centered);
    crate::numerics::dot(&centered, &solved)
}

/// Squared reconstruction error per observation from the deterministic
/// decode at the posterior mean (no latent sampling).
pub fn reconstruction_errors(state: &VaeState, x: &DataMatrix) -> Result<Vec<f64>> {
    let (mu, _) = ardvae::encode(state, x)?;
    let recon = ardvae::decode(state, &mu)?;
    Ok((0..x.rows())
        .map(|r| {
            x.row(r)
                .iter()
                .zip(recon.row(r))
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        })
        .collect())
}

/// Final out-of-control label: at least two of the four indicators.
pub fn consensus_label(
    c: &[bool],
    e: &[bool],
    u: &[bool],
    q: &[bool],
) -> Result<Vec<bool>> {
    let n = c.len();
    if e.len() != n || u.len() != n || q.len() != n {
        return Err(Error::DegenerateInput(
            "indicator vectors differ in length".into(),
        ));
    }
    Ok((0..n)
        .map(|i| (c[i] as u8 + e[i] as u8 + u[i] as u8 + q[i] as u8) >= 2)
        .collect())
}

/// Continuous score in `[0, 4]`: the two binary indicators plus the
/// percentile ranks of the T² and reconstruction statistics.
pub fn anomaly_score(c: &[bool], e: &[bool], t2_values: &[f64], r_values: &[f64]) -> Vec<f64> {
    let t2_rank = percentile_ranks(t2_values);
    let r_rank = percentile_ranks(r_values);
    c.iter()
        .zip(e)
        .zip(t2_rank.iter().zip(&r_rank))
        .map(|((&ci, &ei), (&tr, &rr))| ci as u8 as f64 + ei as u8 as f64 + tr + rr)
        .collect()
}

fn binomial_coefficient(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc
}

/// Probability that at least `k0` of `m` independent detectors fire at
/// level `p`.
fn binomial_tail(m: usize, k0: usize, p: f64) -> f64 {
    (k0..=m)
        .map(|k| binomial_coefficient(m, k) * p.powi(k as i32) * (1.0 - p).powi((m - k) as i32))
        .sum()
}

/// Vote threshold of the majority rule, shared with `aggregate`.
fn majority_votes_needed(m: usize) -> usize {
    m / 2 + 1
}

/// False-alarm calibration: `alpha_base = sqrt(alpha_global / 6)` from
/// the 2-of-4 pairwise approximation, the ensemble budget set equal to
/// it, and the per-detector level solved from the aggregation rule
/// (bisection for majority voting).
pub fn calibrate_alphas(
    alpha_global: f64,
    m: usize,
    rule: ConsensusRule,
) -> Result<(f64, f64, f64)> {
    if !(alpha_global > 0.0 && alpha_global < 1.0) {
        return Err(Error::Calibration(format!(
            "alpha_global must lie in (0, 1), got {alpha_global}"
        )));
    }
    if m < 1 {
        return Err(Error::Calibration("need at least one detector".into()));
    }
    let alpha_base = (alpha_global / 6.0).sqrt();
    let alpha_ens = alpha_base;
    let alpha0 = match rule {
        ConsensusRule::Any => {
            let a0 = alpha_ens / m as f64;
            if !(a0 > 0.0 && a0 < 1.0) {
                return Err(Error::Calibration(format!(
                    "any-rule per-detector level {a0} out of (0, 1)"
                )));
            }
            a0
        }
        ConsensusRule::All => alpha_ens.powf(1.0 / m as f64),
        ConsensusRule::Majority => {
            let k0 = majority_votes_needed(m);
            // The tail is monotone in p: bisection to 1e-10.
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            while hi - lo > 1e-10 {
                let mid = 0.5 * (lo + hi);
                if binomial_tail(m, k0, mid) < alpha_ens {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        }
    };
    Ok((alpha_base, alpha_ens, alpha0))
}

/// Ensemble false-alarm rate implied by a per-detector level under the
/// given rule (the forward direction of the calibration algebra).
pub fn ensemble_rate(alpha0: f64, m: usize, rule: ConsensusRule) -> f64 {
    match rule {
        ConsensusRule::Any => binomial_tail(m, 1, alpha0),
        ConsensusRule::All => alpha0.powi(m as i32),
        ConsensusRule::Majority => binomial_tail(m, majority_votes_needed(m), alpha0),
    }
}

/// Ensemble configuration adjusted to a concrete fit-set size: the
/// neighbor counts are clamped below the sample size and the calibrated
/// per-detector level applied when present.
fn effective_ensemble_cfg(
    base: &EnsembleConfig,
    n_fit: usize,
    alpha0_override: Option<f64>,
) -> EnsembleConfig {
    let mut cfg = base.clone();
    cfg.knn_k = cfg.knn_k.min(n_fit.saturating_sub(1)).max(1);
    cfg.lof_k = cfg.lof_k.min(n_fit.saturating_sub(1)).max(1);
    if let Some(a0) = alpha0_override {
        cfg.per_detector_alpha = a0;
    }
    cfg
}

/// Detector count for a stage, accounting for the boxplot rule joining
/// univariate latents.
fn stage_detector_count(cfg: &EnsembleConfig, d_eff: usize) -> usize {
    let mut m = cfg.detectors.len();
    if d_eff == 1 && !cfg.detectors.contains(&DetectorKind::Boxplot) {
        m += 1;
    }
    m
}

/// Runs the full pipeline on one retrospective sample.
pub fn run_vscout(
    x: &DataMatrix,
    cfg: &PipelineConfig,
    rng: &RngStream,
) -> Result<VscoutOutput> {
    cfg.validate()?;
    let n = x.rows();
    if n < MIN_OBSERVATIONS {
        return Err(Error::DegenerateInput(format!(
            "pipeline needs at least {MIN_OBSERVATIONS} observations, got {n}"
        )));
    }
    if cfg.train.batch_size > n {
        return Err(Error::InvalidConfig(format!(
            "batch_size {} exceeds sample size {n}",
            cfg.train.batch_size
        )));
    }

    // Step 1: initial training and relevance selection.
    let mut train_rng = rng.substream(TAG_TRAIN);
    let state0 = ardvae::init(&cfg.train, x.cols(), &mut train_rng)?;
    let (state1, summary1, train_loss) = ardvae::train(state0, x, &cfg.train, &mut train_rng)?;
    let d_eff1 = summary1.d_eff();

    let calibration_budget = cfg
        .alpha_global
        .map(|ag| -> Result<(f64, f64)> {
            let (alpha_base, alpha_ens, _) = calibrate_alphas(ag, 1, cfg.ensemble.rule)?;
            Ok((alpha_base, alpha_ens))
        })
        .transpose()?;
    let (alpha_t2_eff, alpha_rec_eff) = match calibration_budget {
        Some((alpha_base, _)) => (alpha_base, alpha_base),
        None => (cfg.alpha_t2, cfg.alpha_rec),
    };

    // Step 2b: changepoint filter on the latent magnitudes.
    let magnitudes = changepoint::latent_magnitude(&summary1.mu_star);
    let provisional_seg = changepoint::pelt_segment(&magnitudes, &cfg.pelt)?;
    let c0 = changepoint::changepoint_flags(&provisional_seg, n);

    // Step 2a: provisional ensemble on the relevant latents, capped.
    let alpha0_provisional = cfg
        .alpha_global
        .map(|ag| {
            calibrate_alphas(ag, stage_detector_count(&cfg.ensemble, d_eff1), cfg.ensemble.rule)
                .map(|(_, _, a0)| a0)
        })
        .transpose()?;
    let ens_cfg1 = effective_ensemble_cfg(&cfg.ensemble, n, alpha0_provisional);
    let mut ens_rng1 = rng.substream(TAG_ENSEMBLE_PROVISIONAL);
    let fitted1 = detectors::fit_ensemble(&summary1.mu_star, &ens_cfg1, &mut ens_rng1)?;
    let outcome1 = fitted1.score_and_flag(
        &summary1.mu_star,
        &identity_self_map(n),
        None,
        ens_cfg1.per_detector_alpha,
        ens_cfg1.rule,
    )?;
    let e0 = cap_contamination(
        &outcome1.flags,
        &outcome1.combined_rank,
        ens_cfg1.contamination_cap,
    )?;

    // Provisional mask m_i = 1 - max(e0_i, c0_i).
    let mask: Vec<bool> = (0..n).map(|i| !(e0[i] || c0[i])).collect();
    let inliers: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
    if inliers.is_empty() {
        return Err(Error::Pipeline("no inliers retained".into()));
    }

    // Step 3: warm-started refinement on the retained subset.
    let x_in = x.select_rows(&inliers);
    let mut refine_rng = rng.substream(TAG_REFINE);
    let refine_outcome = ardvae::refine(
        &state1,
        &x_in,
        &summary1.relevant,
        &cfg.train,
        cfg.refine_epochs,
        &mut refine_rng,
    )?;
    let state2 = refine_outcome.state;
    let relevant_final = refine_outcome.summary.relevant.clone();
    let latent_final = ardvae::summarize_with_relevant(&state2, x, &relevant_final)?;
    let z_all = &latent_final.mu_star;
    let d_eff2 = latent_final.d_eff();

    // Final changepoint indicator: the provisional segmentation by
    // default, optionally recomputed on the refined magnitudes.
    let (segmentation, c_final) = if cfg.recompute_changepoints {
        let refined_magnitudes = changepoint::latent_magnitude(z_all);
        let seg = changepoint::pelt_segment(&refined_magnitudes, &cfg.pelt)?;
        let flags = changepoint::changepoint_flags(&seg, n);
        (seg, flags)
    } else {
        (provisional_seg.clone(), c0.clone())
    };

    // IC statistics from the refined inlier latents.
    let z_in = z_all.select_rows(&inliers);
    let mut baseline = estimate_ic_stats(&z_in, alpha_t2_eff)?;

    let t2_values: Vec<f64> = (0..n).map(|i| hotelling_t2(z_all.row(i), &baseline)).collect();
    let u: Vec<bool> = t2_values.iter().map(|&v| v > baseline.t2_threshold).collect();

    // Reconstruction indicator with the inlier-derived cutoff.
    let recon_errors_all = reconstruction_errors(&state2, x)?;
    let recon_in: Vec<f64> = inliers.iter().map(|&i| recon_errors_all[i]).collect();
    let recon_cutoff = empirical_quantile(&recon_in, 1.0 - alpha_rec_eff)?;
    baseline.recon_cutoff = Some(recon_cutoff);
    let q: Vec<bool> = recon_errors_all.iter().map(|&r| r > recon_cutoff).collect();

    // Final ensemble: refit on inlier latents, score all observations,
    // thresholds from the inlier score distribution.
    let alpha0_final = cfg
        .alpha_global
        .map(|ag| {
            calibrate_alphas(ag, stage_detector_count(&cfg.ensemble, d_eff2), cfg.ensemble.rule)
                .map(|(_, _, a0)| a0)
        })
        .transpose()?;
    let ens_cfg2 = effective_ensemble_cfg(&cfg.ensemble, inliers.len(), alpha0_final);
    let mut ens_rng2 = rng.substream(TAG_ENSEMBLE_FINAL);
    let fitted2 = detectors::fit_ensemble(&z_in, &ens_cfg2, &mut ens_rng2)?;
    let mut self_map = vec![None; n];
    for (fit_row, &obs) in inliers.iter().enumerate() {
        self_map[obs] = Some(fit_row);
    }
    let outcome2 = fitted2.score_and_flag(
        z_all,
        &self_map,
        Some(&inliers),
        ens_cfg2.per_detector_alpha,
        ens_cfg2.rule,
    )?;
    let e_final = outcome2.flags;

    let labels = consensus_label(&c_final, &e_final, &u, &q)?;
    let scores = anomaly_score(&c_final, &e_final, &t2_values, &recon_errors_all);

    // Decoder sensitivity diagnostic at the mean latent point.
    let latent_mean = latent_final.mu.col_means();
    let jacobian_column_norms = ardvae::jacobian_column_norms(&state2, &latent_mean);

    let calibration = match (cfg.alpha_global, calibration_budget) {
        (Some(ag), Some((alpha_base, alpha_ens))) => Some(CalibrationInfo {
            alpha_global: ag,
            alpha_base,
            alpha_ens,
            alpha0_provisional: alpha0_provisional.unwrap_or(cfg.ensemble.per_detector_alpha),
            alpha0_final: alpha0_final.unwrap_or(cfg.ensemble.per_detector_alpha),
            note: "changepoint penalty left at its configured value; no mapping from a \
                   false-alarm level to the penalty is defined"
                .to_string(),
        }),
        _ => None,
    };

    let diagnostics = Diagnostics {
        train_loss,
        refine_loss: refine_outcome.loss_history,
        d_eff_initial: d_eff1,
        d_eff_final: d_eff2,
        relevant_initial: summary1.relevant.clone(),
        relevant_final,
        refine_restored: refine_outcome.restored,
        tau_star: segmentation.tau_star(),
        provisional_changepoint: c0,
        provisional_ensemble: e0,
        n_in: inliers.len(),
        per_detector_provisional: outcome1
            .per_detector
            .iter()
            .map(|d| (d.detector_id.clone(), d.flags.iter().filter(|&&f| f).count()))
            .collect(),
        per_detector_final: outcome2
            .per_detector
            .iter()
            .map(|d| (d.detector_id.clone(), d.flags.iter().filter(|&&f| f).count()))
            .collect(),
        t2_values,
        recon_errors: recon_errors_all,
        jacobian_column_norms,
        calibration,
    };

    Ok(VscoutOutput {
        flags: FlagSet {
            changepoint: c_final,
            ensemble: e_final,
            t2: u,
            reconstruction: q,
            provisional_mask: mask,
            labels,
            anomaly_score: scores,
        },
        baseline,
        latent: latent_final,
        segmentation,
        diagnostics,
        state: state2,
    })
}
