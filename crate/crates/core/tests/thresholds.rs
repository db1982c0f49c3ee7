//! The threshold fixture is the single source for acceptance limits; pin its
//! values so an edit to the file cannot silently loosen a criterion.

use rubric_aqa::acceptance::Thresholds;

#[test]
fn fixture_values_are_the_documented_limits() {
    let t = Thresholds::builtin();
    assert_eq!(t.gradient_check.trials, 100);
    assert_eq!(t.gradient_check.primitive_max_rel_err, 1e-4);
    assert_eq!(t.gradient_check.end_to_end_max_rel_err, 1e-3);
    assert_eq!(
        (t.gradient_check.end_to_end_clips, t.gradient_check.end_to_end_d_model, t.gradient_check.end_to_end_steps),
        (4, 8, 2)
    );
    assert_eq!(t.gradient_check.max_seconds, 60.0);

    assert_eq!(t.closed_form.tolerance, 1e-9);
    assert_eq!(t.closed_form.kl_mc_samples, 100_000);
    assert_eq!(t.closed_form.kl_mc_rel_tol, 0.02);

    assert_eq!(t.metric_oracles.vectors, 1000);
    assert_eq!(t.metric_oracles.max_len, 100);
    assert_eq!(t.metric_oracles.tau_denominator, 45);
    assert_eq!(t.dag_determinism.topologies, 50);

    assert_eq!(t.overfit.samples, 4);
    assert_eq!(t.overfit.epochs, 500);
    assert_eq!(t.overfit.max_train_mse, 1e-3);
    assert_eq!(t.overfit.srcc, 1.0);
    assert_eq!(t.overfit.max_seconds, 120.0);

    let r = &t.synthetic_recovery;
    assert_eq!((r.n_train, r.n_test, r.clips, r.d_feat), (500, 150, 24, 32));
    assert_eq!((r.k_min, r.k_max), (2, 5));
    assert_eq!((r.eta_min, r.eta_max), (0.05, 0.5));
    assert_eq!(r.data_seed, 7);
    assert_eq!(r.run_seeds.len(), 3);
    assert_eq!((r.min_srcc, r.min_tau), (0.85, 0.3));
    assert_eq!(r.max_seconds, 1800.0);

    assert_eq!(t.deterministic_tradeoff.max_rl2_ratio, 1.1);
    assert_eq!(t.inference_averaging.keys, 200);
    assert_eq!(t.inference_averaging.samples, 20);
    assert_eq!((t.inference_averaging.min_ratio, t.inference_averaging.max_ratio), (3.5, 5.5));
    assert_eq!(t.localization.gamma, 0.1);
    assert_eq!(t.localization.min_margin_over_chance, 0.15);
}

#[test]
fn fixture_rejects_unknown_keys() {
    let mut v: serde_json::Value = serde_json::from_str(rubric_aqa::acceptance::THRESHOLDS_JSON).unwrap();
    v["overfit"]["slack"] = serde_json::json!(1.0);
    assert!(serde_json::from_value::<Thresholds>(v).is_err());
}

#[test]
fn defaults_used_by_training_criteria_match_the_fixture() {
    let t = Thresholds::builtin();
    let run = rubric_aqa::engine::RunConfig::default();
    assert_eq!(run.loss.gamma, t.localization.gamma);
    assert_eq!(run.n_inference_samples, t.inference_averaging.samples);
    let gen = rubric_aqa::acceptance::recovery_generator(&t.synthetic_recovery);
    assert_eq!((gen.n_train, gen.n_test, gen.t, gen.d_feat, gen.seed), (500, 150, 24, 32, 7));
}
