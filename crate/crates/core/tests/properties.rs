use nalgebra::DMatrix;
use proptest::prelude::*;

use selfdistill::distill::{closed_form_output, propagate, trajectory, OutputMatrix, Sample};
use selfdistill::experiment::{ExperimentConfig, Mode, Realization, Sweep};
use selfdistill::gram::{analytic_eigensystem, build_gram, GramModel};
use selfdistill::noise::{
    evolving_condition, make_corruption, minimal_rounds, pll_accuracy_condition, sd_accuracy_condition,
    theory_constants, CorruptionKind, CorruptionMatrix, MinimalRounds,
};

/// Birkhoff mixture: weight on the identity plus random permutations, so
/// rows and columns sum to one by construction.
fn doubly_stochastic(k: usize) -> impl Strategy<Value = CorruptionMatrix> {
    (
        0.0..1.0f64,
        prop::collection::vec((Just((0..k).collect::<Vec<_>>()).prop_shuffle(), 0.0..1.0f64), 1..4),
    )
        .prop_map(move |(w0, perms)| {
            let total = w0 + perms.iter().map(|p| p.1).sum::<f64>();
            let mut m = DMatrix::identity(k, k) * (w0 / total);
            for (perm, w) in &perms {
                for (a, &b) in perm.iter().enumerate() {
                    m[(a, b)] += w / total;
                }
            }
            // Re-normalise away rounding in the weights.
            for _ in 0..3 {
                for mut r in m.row_iter_mut() {
                    let s = r.sum();
                    r /= s;
                }
                for mut c in m.column_iter_mut() {
                    let s = c.sum();
                    c /= s;
                }
            }
            CorruptionMatrix::with_tolerance(m, 1e-10).unwrap()
        })
}

fn small_case_iii() -> impl Strategy<Value = (GramModel, f64)> {
    (2usize..5, 1usize..5, 0.05..0.9f64, 0.0..1.0f64, -4.0..-1.0f64).prop_map(|(k, n, c, dfrac, log_lambda)| {
        (GramModel::case_iii(k, n, c, c * dfrac * 0.9), 10f64.powf(log_lambda))
    })
}

/// One label-averaging step `Y ← U + (Y − U) Φ(Φ + κI)^{-1}` by a dense solve.
fn dense_step(y: &DMatrix<f64>, gram: &DMatrix<f64>, kappa: f64) -> DMatrix<f64> {
    let k = y.nrows() as f64;
    let shifted = gram + DMatrix::identity(gram.nrows(), gram.nrows()) * kappa;
    let inv = shifted.try_inverse().unwrap();
    let centred = y.map(|x| x - 1.0 / k);
    (centred * gram * inv).map(|x| x + 1.0 / k)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn eigen_form_matches_repeated_dense_steps((model, lambda) in small_case_iii(), t in 1u32..6, seed in 0u64..1000) {
        let eig = analytic_eigensystem(&model).unwrap();
        let gram = build_gram(&model).unwrap();
        let labels: Vec<usize> = (0..model.k * model.n).map(|i| ((i as u64 * 7 + seed) % model.k as u64) as usize).collect();
        let y0 = OutputMatrix::one_hot(&labels, model.k).unwrap();
        let eigen = propagate(&y0, &eig, lambda, model.n, t).unwrap();
        let kappa = (model.k * model.k * model.n) as f64 * lambda;
        let mut y = y0.values.clone();
        for _ in 0..t {
            y = dense_step(&y, &gram, kappa);
        }
        prop_assert!((eigen.values - y).amax() < 1e-10);
    }

    #[test]
    fn trajectory_columns_remain_distributions((model, lambda) in small_case_iii(), t_max in 0u32..8) {
        let eig = analytic_eigensystem(&model).unwrap();
        let labels: Vec<usize> = (0..model.k * model.n).map(|i| (i * 3 + 1) % model.k).collect();
        let y0 = OutputMatrix::one_hot(&labels, model.k).unwrap();
        for y in trajectory(&y0, &eig, lambda, model.n, t_max).unwrap() {
            prop_assert!(y.max_column_sum_error() < 1e-12);
            prop_assert!(y.min_entry() >= -1e-12);
        }
    }

    #[test]
    fn condition_is_monotone_in_rounds(c in doubly_stochastic(4), n in 5usize..200, log_lambda in -5.0..-2.0f64) {
        let tc = theory_constants(&GramModel::case_iii(4, n, 0.4, 0.1), 10f64.powf(log_lambda)).unwrap();
        let mut held = false;
        for t in 1..=12 {
            let now = sd_accuracy_condition(&c, &tc, t).unwrap().achieves_100;
            prop_assert!(!(held && !now), "condition lost at t = {}", t);
            held = now;
        }
        match minimal_rounds(&c, &tc).unwrap() {
            MinimalRounds::Rounds(r) => {
                prop_assert!(sd_accuracy_condition(&c, &tc, r).unwrap().achieves_100);
                if r > 1 {
                    prop_assert!(!sd_accuracy_condition(&c, &tc, r - 1).unwrap().achieves_100);
                }
            }
            MinimalRounds::Unreachable => {
                prop_assert!(!sd_accuracy_condition(&c, &tc, 200).unwrap().achieves_100);
            }
        }
    }

    #[test]
    fn pll_holds_whenever_some_round_does(c in doubly_stochastic(4), log_lambda in -5.0..-2.0f64) {
        let tc = theory_constants(&GramModel::case_iii(4, 100, 0.4, 0.1), 10f64.powf(log_lambda)).unwrap();
        let any_round = (1..=10).any(|t| sd_accuracy_condition(&c, &tc, t).unwrap().achieves_100);
        if any_round {
            prop_assert!(pll_accuracy_condition(&c).achieves_100);
        }
    }

    #[test]
    fn constant_schedule_matches_fixed_features(eta in 0.0..0.75f64, t in 1u32..8, c in 0.2..0.8f64, dfrac in 0.0..0.9f64) {
        let d = c * dfrac;
        let lambda = 3.125e-4;
        let tc = theory_constants(&GramModel::case_iii(4, 100, c, d), lambda).unwrap();
        let cm = make_corruption(CorruptionKind::Symmetric, eta, 4, None, None).unwrap();
        let schedule = vec![(c, d); t as usize];
        prop_assert_eq!(
            evolving_condition(&cm, &schedule, lambda, 4, 100, t).unwrap(),
            sd_accuracy_condition(&cm, &tc, t).unwrap().achieves_100
        );
    }

    #[test]
    fn closed_form_outputs_are_distributions(c in doubly_stochastic(3), t in 0u32..10, y in 0usize..3, g in 0usize..3) {
        let tc = theory_constants(&GramModel::case_iii(3, 50, 0.5, 0.2), 1e-3).unwrap();
        let out = closed_form_output(Sample { true_label: y, given_label: g }, &c, &tc, t).unwrap();
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_round_trips(eta in 0.0..1.0f64, lambda in 1e-6..1.0f64, seed in any::<u64>(), t_max in 0u32..20, rounded in any::<bool>()) {
        let mut cfg = ExperimentConfig::setup_a();
        cfg.corruption.eta = eta;
        cfg.lambda = lambda;
        cfg.seed = seed;
        cfg.t_max = t_max;
        cfg.realization = if rounded { Realization::Rounded } else { Realization::Exact };
        cfg.modes = vec![Mode::ClosedForm, Mode::Oracle];
        cfg.sweep = Some(Sweep::Eta(vec![0.0, eta]));
        let back = ExperimentConfig::from_json_str(&cfg.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
