//! Desk-scale end-to-end runs of the full pipeline.

use vscout_core::ardvae::TrainConfig;
use vscout_core::changepoint::PeltConfig;
use vscout_core::detectors::EnsembleConfig;
use vscout_core::pipeline::{run_vscout, PipelineConfig};
use vscout_core::simgen::{self, Distribution, ScenarioSpec, ShiftType};
use vscout_core::{Error, RngStream};

/// Small architecture and epoch budget so a run takes well under a second.
fn fast_config() -> PipelineConfig {
    PipelineConfig {
        train: TrainConfig {
            hidden: 16,
            latent: 8,
            learning_rate: 1e-3,
            max_epochs: 40,
            patience: 10,
            batch_size: 32,
            ..TrainConfig::default()
        },
        ensemble: EnsembleConfig {
            knn_k: 5,
            lof_k: 10,
            iforest_trees: 50,
            ..EnsembleConfig::default()
        },
        pelt: PeltConfig::default(),
        ..PipelineConfig::default()
    }
}

fn scenario(dist: Distribution, n: usize, p: usize, delta: f64, gamma: f64, shift: ShiftType, seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        dist,
        n,
        p,
        delta,
        gamma,
        shift_type: shift,
        seed,
    }
}

#[test]
fn identical_seeds_give_identical_labels() {
    let spec = scenario(Distribution::Normal, 80, 10, 3.0, 0.1, ShiftType::Transient, 5);
    let sample = simgen::generate(&spec, &mut RngStream::new(spec.seed)).unwrap();
    let cfg = fast_config();
    let a = run_vscout(&sample.x, &cfg, &RngStream::new(11)).unwrap();
    let b = run_vscout(&sample.x, &cfg, &RngStream::new(11)).unwrap();
    assert_eq!(a.flags.labels, b.flags.labels);
    assert_eq!(a.flags.ensemble, b.flags.ensemble);
    assert_eq!(a.flags.anomaly_score, b.flags.anomaly_score);
    assert_eq!(a.diagnostics.train_loss, b.diagnostics.train_loss);
}

#[test]
fn provisional_mask_identity_holds() {
    let spec = scenario(Distribution::T5, 120, 8, 2.0, 0.1, ShiftType::Transient, 6);
    let sample = simgen::generate(&spec, &mut RngStream::new(spec.seed)).unwrap();
    let out = run_vscout(&sample.x, &fast_config(), &RngStream::new(3)).unwrap();
    let d = &out.diagnostics;
    for i in 0..120 {
        let expected = !(d.provisional_ensemble[i] || d.provisional_changepoint[i]);
        assert_eq!(out.flags.provisional_mask[i], expected, "row {i}");
    }
    assert_eq!(
        d.n_in,
        out.flags.provisional_mask.iter().filter(|&&m| m).count()
    );
}

#[test]
fn cap_bounds_provisional_removals_without_changepoints() {
    // Clean data: PELT finds no changepoints, so removals come from the
    // capped ensemble alone.
    let spec = scenario(Distribution::Normal, 100, 6, 0.0, 0.0, ShiftType::None, 7);
    let sample = simgen::generate(&spec, &mut RngStream::new(spec.seed)).unwrap();
    let cfg = fast_config();
    let out = run_vscout(&sample.x, &cfg, &RngStream::new(4)).unwrap();
    if out.diagnostics.provisional_changepoint.iter().all(|&c| !c) {
        let removed = out.flags.provisional_mask.iter().filter(|&&m| !m).count();
        let cap = (cfg.ensemble.contamination_cap * 100.0).ceil() as usize;
        assert!(removed <= cap, "removed {removed} > cap {cap}");
    }
}

#[test]
fn rejects_small_samples() {
    let spec = scenario(Distribution::Normal, 30, 4, 0.0, 0.0, ShiftType::None, 8);
    let sample = simgen::generate(&spec, &mut RngStream::new(spec.seed)).unwrap();
    let small = sample.x.select_rows(&(0..15).collect::<Vec<_>>());
    assert!(matches!(
        run_vscout(&small, &fast_config(), &RngStream::new(1)),
        Err(Error::DegenerateInput(_))
    ));
}

#[test]
fn flags_have_consistent_shapes_and_score_range() {
    let spec = scenario(Distribution::Mixed, 90, 12, 2.5, 0.1, ShiftType::Sustained, 9);
    let sample = simgen::generate(&spec, &mut RngStream::new(spec.seed)).unwrap();
    let out = run_vscout(&sample.x, &fast_config(), &RngStream::new(21)).unwrap();
    let n = 90;
    assert_eq!(out.flags.labels.len(), n);
    assert_eq!(out.flags.changepoint.len(), n);
    assert_eq!(out.flags.ensemble.len(), n);
    assert_eq!(out.flags.t2.len(), n);
    assert_eq!(out.flags.reconstruction.len(), n);
    assert_eq!(out.flags.anomaly_score.len(), n);
    assert!(out
        .flags
        .anomaly_score
        .iter()
        .all(|&s| (0.0..=4.0).contains(&s)));
    // Labels agree with the popcount rule.
    for i in 0..n {
        let votes = out.flags.changepoint[i] as u8
            + out.flags.ensemble[i] as u8
            + out.flags.t2[i] as u8
            + out.flags.reconstruction[i] as u8;
        assert_eq!(out.flags.labels[i], votes >= 2);
    }
    assert_eq!(out.baseline.n_in, out.diagnostics.n_in);
    assert!(out.baseline.recon_cutoff.is_some());
    assert_eq!(
        out.diagnostics.jacobian_column_norms.len(),
        fast_config().train.latent
    );
}

#[test]
fn sustained_shift_triggers_changepoint_flags() {
    // Strong trailing shift: the magnitude series steps up and PELT
    // should place a changepoint near the onset.
    let spec = scenario(Distribution::Normal, 150, 20, 4.0, 0.2, ShiftType::Sustained, 10);
    let sample = simgen::generate(&spec, &mut RngStream::new(spec.seed)).unwrap();
    let mut cfg = fast_config();
    cfg.pelt.penalty = 5.0;
    let out = run_vscout(&sample.x, &cfg, &RngStream::new(31)).unwrap();
    let tau = out.diagnostics.tau_star;
    assert!(tau.is_some(), "no changepoint found");
    let tau = tau.unwrap();
    assert!(
        (110..=130).contains(&tau),
        "changepoint {tau} not near the onset 120"
    );
}

#[test]
fn calibration_is_recorded_and_alters_levels() {
    let spec = scenario(Distribution::Normal, 80, 8, 0.0, 0.0, ShiftType::None, 12);
    let sample = simgen::generate(&spec, &mut RngStream::new(spec.seed)).unwrap();
    let mut cfg = fast_config();
    cfg.alpha_global = Some(0.05);
    let out = run_vscout(&sample.x, &cfg, &RngStream::new(41)).unwrap();
    let cal = out.diagnostics.calibration.expect("calibration info");
    assert!((cal.alpha_base - 0.0912871).abs() < 1e-6);
    assert!(cal.alpha0_provisional > 0.0 && cal.alpha0_provisional < 1.0);
    assert!(!cal.note.is_empty());
}

#[test]
fn anomaly_score_auroc_dominates_binary_labels() {
    use vscout_core::metrics::auroc;
    for seed in [3u64, 14, 25] {
        let spec = scenario(Distribution::Normal, 120, 10, 2.5, 0.1, ShiftType::Transient, seed);
        let sample = simgen::generate(&spec, &mut RngStream::new(spec.seed)).unwrap();
        let out = run_vscout(&sample.x, &fast_config(), &RngStream::new(seed)).unwrap();
        let continuous = auroc(&sample.truth, &out.flags.anomaly_score).unwrap();
        let binary_scores: Vec<f64> = out.flags.labels.iter().map(|&l| l as u8 as f64).collect();
        let binary = auroc(&sample.truth, &binary_scores).unwrap();
        assert!(
            continuous >= binary - 1e-12,
            "seed {seed}: {continuous} < {binary}"
        );
    }
}
