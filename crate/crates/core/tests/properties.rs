//! Invariants over random federations, points and averages.

mod common;

use common::*;
use fairfl::metrics::{select_best, sweep_score, RoundMetrics};
use fairfl::objectives::{loss_variance, norm_sq, QWeights};
use fairfl::theory::QuadraticFederation;
use fairfl::ParamVector;
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = Kind> {
    prop_oneof![Just(Kind::Logistic), Just(Kind::Mlp), Just(Kind::Quadratic)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fair_objectives_dominate_the_mean(k in kind(), seed in 0u64..1000, p in 0.0f64..5.0) {
        let fed = small_federation(k, 4, seed);
        let x = gaussian(seed, 1, fed.spec.param_count(), 0.7);
        let snap = fed.snapshot(&x);
        let f = snap.f_value().unwrap();
        prop_assert!(snap.l_lambda(p).unwrap() >= f);
        prop_assert!(snap.j_gamma(p).unwrap() >= f);
        prop_assert_eq!(snap.l_lambda(0.0).unwrap(), f);
        prop_assert_eq!(snap.h_q_value(0.0, &QWeights::Uniform).unwrap(), f);
    }

    #[test]
    fn surrogate_identities_hold_at_arbitrary_averages(
        k in kind(), seed in 0u64..1000, p in 0.0f64..5.0, a in -3.0f64..3.0,
    ) {
        let fed = small_federation(k, 3, seed);
        let d = fed.spec.param_count();
        let x = gaussian(seed, 2, d, 0.7);
        let g = gaussian(seed, 3, d, 1.0);
        let snap = fed.snapshot(&x);
        let f = snap.f_value().unwrap();
        let gf = snap.f_grad().unwrap();
        let dg = gf.sub(&g);

        let l = snap.l_lambda(p).unwrap();
        let lhs = l - snap.surrogate_loss_l(p, a).unwrap();
        prop_assert!((lhs + 0.5 * p * (f - a).powi(2)).abs() <= 1e-12 * (1.0 + l.abs()));
        let mut lhs = snap.l_lambda_grad(p).unwrap().sub(&snap.surrogate_grad_l(p, a, &g).unwrap());
        lhs.axpy(p * (f - a), &dg);
        prop_assert!(lhs.max_abs() <= 1e-12 * (1.0 + snap.l_lambda_grad(p).unwrap().max_abs()));

        let j = snap.j_gamma(p).unwrap();
        let lhs = j - snap.surrogate_loss_j(p, &g).unwrap();
        prop_assert!((lhs + 0.5 * p * norm_sq(&dg)).abs() <= 1e-12 * (1.0 + j.abs()));
        let gj = snap.j_gamma_grad(p).unwrap();
        let mut lhs = gj.sub(&snap.surrogate_grad_j(p, &g).unwrap());
        lhs.axpy(p, &snap.mean_hvp(&dg).unwrap());
        prop_assert!(lhs.max_abs() <= 1e-12 * (1.0 + gj.max_abs()));
    }

    #[test]
    fn h1_is_bounded_by_l_for_unit_losses(n in 2usize..10, d in 1usize..5, seed in 0u64..1000, u in 0.01f64..=1.0) {
        let base = QuadraticFederation::random(n, d, seed);
        let x = gaussian(seed, 4, d, 1.5);
        let top = base.federation().snapshot(&x).client_losses().unwrap().into_iter().fold(0.0, f64::max);
        let fed = base.scaled(u / top).federation();
        let snap = fed.snapshot(&x);
        let h1 = snap.h_q_value(1.0, &QWeights::Uniform).unwrap();
        let l = snap.l_lambda(n as f64 / (n as f64 - 1.0)).unwrap();
        prop_assert!(h1 <= l + 1e-12, "H_1 = {h1}, L = {l}");
    }

    #[test]
    fn loss_variance_ignores_client_order(mut v in prop::collection::vec(-10.0f64..10.0, 2..20), rot in 0usize..20) {
        let before = loss_variance(&v);
        let k = rot % v.len();
        v.rotate_left(k);
        v.reverse();
        prop_assert!((loss_variance(&v) - before).abs() <= 1e-12 * (1.0 + before));
        prop_assert!(before >= 0.0);
    }

    #[test]
    fn objectives_ignore_client_order(k in kind(), seed in 0u64..1000, p in 0.0f64..3.0) {
        let fed = small_federation(k, 4, seed);
        let mut shards = fed.shards.clone();
        shards.reverse();
        let flipped = fairfl::federation::Federation::new(fed.spec.clone(), shards).unwrap();
        let x = gaussian(seed, 5, fed.spec.param_count(), 0.7);
        let (a, b) = (fed.snapshot(&x), flipped.snapshot(&x));
        let close = |u: f64, v: f64| (u - v).abs() <= 1e-12 * (1.0 + u.abs());
        prop_assert!(close(a.l_lambda(p).unwrap(), b.l_lambda(p).unwrap()));
        prop_assert!(close(a.j_gamma(p).unwrap(), b.j_gamma(p).unwrap()));
        prop_assert!(rel_err(&a.j_gamma_grad(p).unwrap(), &b.j_gamma_grad(p).unwrap()) <= 1e-12);
    }

    #[test]
    fn sweep_score_rewards_accuracy_and_penalizes_variance(
        acc in 0.0f64..1.0, var in 0.0f64..0.25, bump in 1e-6f64..0.1, n in 1usize..10,
    ) {
        let s = sweep_score(acc, var, n).unwrap();
        prop_assert!(sweep_score(acc + bump, var, n).unwrap() > s);
        prop_assert!(sweep_score(acc, var + bump, n).unwrap() < s);
        prop_assert!(s <= acc);
    }

    #[test]
    fn best_round_is_stable_under_duplication(accs in prop::collection::vec(0.0f64..1.0, 1..30), vars in prop::collection::vec(0.0f64..0.1, 30)) {
        let rows: Vec<RoundMetrics> = accs
            .iter()
            .zip(&vars)
            .map(|(&a, &v)| RoundMetrics { per_client_acc: vec![], per_client_loss: vec![], mean_acc: a, acc_variance: v, mean_loss: 0.0 })
            .collect();
        let best = select_best(&rows);
        let doubled: Vec<RoundMetrics> = rows.iter().chain(&rows).cloned().collect();
        prop_assert_eq!(select_best(&doubled), best);
        for r in &rows {
            prop_assert!(r.mean_acc <= rows[best].mean_acc);
        }
    }

    #[test]
    fn model_gradients_are_finite_and_sized(k in kind(), seed in 0u64..1000, scale in 0.0f64..5.0) {
        let fed = small_federation(k, 2, seed);
        let d = fed.spec.param_count();
        let x = gaussian(seed, 6, d, scale);
        let g = fed.spec.grad(&x, &fed.shards[0].train).unwrap();
        prop_assert_eq!(g.len(), d);
        prop_assert!(g.is_finite());
        let zero = ParamVector::zeros(d);
        prop_assert_eq!(fed.spec.hvp(&x, &zero, &fed.shards[0].train).unwrap().max_abs(), 0.0);
    }
}
