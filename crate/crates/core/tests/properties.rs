use proptest::prelude::*;

use rubric_aqa::losses::{attention_centers, ranking_loss, sparsity_loss};
use rubric_aqa::metrics::{kendall_numerator, kendall_tau, spearman_srcc};
use rubric_aqa::model::AttentionMap;
use rubric_aqa::rubric::{build_dag, NodeKind, RubricSpec, Stage, StepType};
use rubric_aqa::stochastic::{kl_standard_normal, uncertainty, GaussianEmbedding};

fn spec(n_types: u32, stages: u32) -> RubricSpec {
    // type t belongs to stage t % stages when that stage is declared; the
    // highest type is left stageless so the root also gets direct leaves.
    RubricSpec {
        step_types: (0..n_types).map(|id| StepType { id, name: format!("t{id}") }).collect(),
        stages: (0..stages)
            .map(|s| Stage { id: 10 + s, members: (0..n_types - 1).filter(|t| t % stages == s).collect() })
            .collect(),
        difficulty_multiplier: false,
        ordered: true,
    }
}

fn sign(x: f64) -> i64 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

fn one_hot_rows(peaks: &[usize], t: usize) -> AttentionMap {
    let mut values = vec![0.0; peaks.len() * t];
    for (s, &p) in peaks.iter().enumerate() {
        values[s * t + p - 1] = 1.0;
    }
    AttentionMap { k: peaks.len(), t, values }
}

proptest! {
    #[test]
    fn built_dags_satisfy_invariants(steps in prop::collection::vec(0u32..6, 1..9), stages in 1u32..4) {
        let spec = spec(6, stages);
        let dag = build_dag(&spec, &steps).unwrap();
        prop_assert_eq!(dag.validate(), Ok(()));
        prop_assert_eq!(dag.leaf_step_types(), steps.clone());
        prop_assert_eq!(dag.topo().len(), dag.node_count());
        prop_assert_eq!(&dag, &build_dag(&spec, &steps).unwrap());
        let root = dag.root().unwrap();
        prop_assert_eq!(*dag.topo().last().unwrap(), root);
        // every leaf has exactly one outgoing edge, to its stage node or the root
        for leaf in 0..steps.len() {
            let out: Vec<usize> = dag.edges().iter().filter(|e| e.0 == leaf).map(|e| e.1).collect();
            prop_assert_eq!(out.len(), 1);
            let target = &dag.nodes()[out[0]];
            match spec.stage_of(steps[leaf]) {
                Some(stage) => prop_assert_eq!(target.label, Some(stage)),
                None => prop_assert_eq!(target.kind, NodeKind::Root),
            }
        }
    }

    #[test]
    fn uncertainty_scales_with_sigma(
        sigmas in prop::collection::vec(prop::collection::vec(0.01f64..5.0, 4), 1..5),
        c in 0.1f64..10.0,
    ) {
        let scaled: Vec<Vec<f64>> = sigmas.iter().map(|s| s.iter().map(|x| x * c).collect()).collect();
        let a = uncertainty(&sigmas).unwrap();
        let b = uncertainty(&scaled).unwrap();
        prop_assert!((b - c * a).abs() <= 1e-9 * b.abs().max(1.0));
        // harmonic mean never exceeds the arithmetic mean
        let arith: f64 = sigmas.iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).sum();
        prop_assert!(a <= arith + 1e-12);
    }

    #[test]
    fn kl_is_nonnegative(mu in prop::collection::vec(-4.0f64..4.0, 1..8), log_sigma in prop::collection::vec(-3.0f64..3.0, 8)) {
        let sigma: Vec<f64> = log_sigma[..mu.len()].iter().map(|l| l.exp()).collect();
        let kl = kl_standard_normal(&GaussianEmbedding::new(mu.clone(), sigma).unwrap()).unwrap();
        prop_assert!(kl >= -1e-12);
        let unit = kl_standard_normal(&GaussianEmbedding::new(vec![0.0; mu.len()], vec![1.0; mu.len()]).unwrap()).unwrap();
        prop_assert!(unit.abs() < 1e-15);
    }

    #[test]
    fn srcc_ignores_monotone_transforms(x in prop::collection::vec(-100.0f64..100.0, 3..40), y in prop::collection::vec(-100.0f64..100.0, 40)) {
        let y = &y[..x.len()];
        prop_assume!(x.iter().any(|v| *v != x[0]) && y.iter().any(|v| *v != y[0]));
        let r = spearman_srcc(&x, y).unwrap();
        let warped: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0 * v).collect();
        prop_assert!((spearman_srcc(&warped, y).unwrap() - r).abs() < 1e-12);
        prop_assert!((spearman_srcc(y, &x).unwrap() - r).abs() < 1e-12);
        let flipped: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert!((spearman_srcc(&flipped, y).unwrap() + r).abs() < 1e-12);
    }

    #[test]
    fn kendall_matches_pairwise_count(x in prop::collection::vec(0u8..6, 0..60), y in prop::collection::vec(0u8..6, 60)) {
        let x: Vec<f64> = x.into_iter().map(f64::from).collect();
        let y: Vec<f64> = y[..x.len()].iter().map(|&v| f64::from(v)).collect();
        let mut brute = 0i64;
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                brute += sign(x[j] - x[i]) * sign(y[j] - y[i]);
            }
        }
        prop_assert_eq!(kendall_numerator(&x, &y), brute);
    }

    #[test]
    fn binned_tau_reverses_with_the_bins(mae in prop::collection::vec(0.0f64..1.0, 10)) {
        let tau = kendall_tau(&mae).unwrap();
        let reversed: Vec<f64> = mae.iter().rev().copied().collect();
        prop_assert!((kendall_tau(&reversed).unwrap() + tau).abs() < 1e-12);
        prop_assert!((tau * 45.0 - (tau * 45.0).round()).abs() < 1e-9);
    }

    #[test]
    fn one_hot_attention_costs_nothing_when_ordered(gaps in prop::collection::vec(2usize..5, 1..5)) {
        // peaks at 2, 2+g1, ... are ≥ margin apart and inside [1 + margin, T − margin]
        let mut peaks = vec![2];
        for g in &gaps {
            let next = peaks.last().unwrap() + g;
            peaks.push(next);
        }
        let t = peaks.last().unwrap() + 1;
        let a = one_hot_rows(&peaks, t);
        prop_assert_eq!(sparsity_loss(&a), 0.0);
        let centers = attention_centers(&a);
        prop_assert_eq!(centers.clone(), peaks.iter().map(|&p| p as f64).collect::<Vec<_>>());
        prop_assert_eq!(ranking_loss(&centers, t, 1.0).unwrap(), 0.0);
        let mut swapped = centers.clone();
        swapped.reverse();
        if peaks.len() > 1 {
            prop_assert!(ranking_loss(&swapped, t, 1.0).unwrap() > 0.0);
        }
    }

    #[test]
    fn spread_attention_pays_sparsity(t in 2usize..30) {
        let uniform = AttentionMap { k: 1, t, values: vec![1.0 / t as f64; t] };
        // mean absolute deviation of 1..=t around its mean
        let mean = (t as f64 + 1.0) / 2.0;
        let mad = (1..=t).map(|i| (i as f64 - mean).abs()).sum::<f64>() / t as f64;
        prop_assert!((sparsity_loss(&uniform) - mad).abs() < 1e-12);
    }
}
