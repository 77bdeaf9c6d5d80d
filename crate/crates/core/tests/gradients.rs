//! Analytic derivatives against central finite differences.

mod common;

use common::*;
use fairfl::objectives::QWeights;
use fairfl::ParamVector;

const PROBES: u64 = 20;
const H: f64 = 1e-5;

#[test]
fn client_gradients_match_finite_differences() {
    for kind in KINDS {
        let fed = small_federation(kind, 3, 11);
        for p in 0..PROBES {
            let x = gaussian(1, p, fed.spec.param_count(), 0.5);
            for shard in &fed.shards {
                let g = fed.spec.grad(&x, &shard.train).unwrap();
                let fd = fd_grad(|y| fed.spec.loss(y, &shard.train).unwrap(), &x, H);
                let e = rel_err(&g, &fd);
                assert!(e <= 1e-5, "{kind:?} probe {p}: gradient error {e:e}");
            }
        }
    }
}

#[test]
fn hvp_matches_gradient_differences() {
    for kind in KINDS {
        let fed = small_federation(kind, 2, 12);
        let d = fed.spec.param_count();
        for p in 0..PROBES {
            let x = gaussian(2, p, d, 0.5);
            let v = gaussian(3, p, d, 1.0);
            let batch = &fed.shards[0].train;
            let hv = fed.spec.hvp(&x, &v, batch).unwrap();
            let fd = fd_directional(|y| fed.spec.grad(y, batch).unwrap().into_inner(), &x, &v, H);
            let e = rel_err(&hv, &fd);
            assert!(e <= 1e-5, "{kind:?} probe {p}: hvp error {e:e}");
        }
    }
}

#[test]
fn objective_gradients_match_finite_differences() {
    for kind in KINDS {
        let fed = small_federation(kind, 4, 13);
        let d = fed.spec.param_count();
        for p in 0..PROBES / 2 {
            let x = gaussian(4, p, d, 0.5);
            let snap = fed.snapshot(&x);
            let at = |y: &ParamVector| fed.snapshot(y).l_lambda(0.7).unwrap();
            let e = rel_err(&snap.l_lambda_grad(0.7).unwrap(), &fd_grad(at, &x, H));
            assert!(e <= 1e-5, "{kind:?} probe {p}: L gradient error {e:e}");

            let at = |y: &ParamVector| fed.snapshot(y).j_gamma(0.7).unwrap();
            let e = rel_err(&snap.j_gamma_grad(0.7).unwrap(), &fd_grad(at, &x, H));
            assert!(e <= 1e-4, "{kind:?} probe {p}: J gradient error {e:e}");

            let at = |y: &ParamVector| fed.snapshot(y).h_q_value(1.5, &QWeights::DataProportional).unwrap();
            let e = rel_err(&snap.h_q_grad(1.5, &QWeights::DataProportional).unwrap(), &fd_grad(at, &x, H));
            assert!(e <= 1e-5, "{kind:?} probe {p}: H gradient error {e:e}");
        }
    }
}

#[test]
fn surrogate_gradients_match_finite_differences_with_fixed_averages() {
    for kind in KINDS {
        let fed = small_federation(kind, 3, 14);
        let d = fed.spec.param_count();
        let x_prev = gaussian(5, 99, d, 0.5);
        let a = fed.snapshot(&x_prev).f_value().unwrap();
        let g = fed.snapshot(&x_prev).f_grad().unwrap();
        for p in 0..PROBES / 2 {
            let x = gaussian(5, p, d, 0.5);
            let snap = fed.snapshot(&x);
            // The loss surrogate's gradient subtracts the stale g inside the
            // mean, so it differs from the exact derivative by λ(F − a)g.
            let at = |y: &ParamVector| fed.snapshot(y).surrogate_loss_l(1.3, a).unwrap();
            let mut exact = snap.surrogate_grad_l(1.3, a, &g).unwrap();
            exact.axpy(1.3 * (snap.f_value().unwrap() - a), &g);
            let e = rel_err(&exact, &fd_grad(at, &x, H));
            assert!(e <= 1e-5, "{kind:?} probe {p}: loss surrogate error {e:e}");
            let at = |y: &ParamVector| fed.snapshot(y).surrogate_loss_j(1.3, &g).unwrap();
            let e = rel_err(&snap.surrogate_grad_j(1.3, &g).unwrap(), &fd_grad(at, &x, H));
            assert!(e <= 1e-4, "{kind:?} probe {p}: gradient surrogate error {e:e}");
        }
    }
}

#[test]
fn quadratic_losses_match_closed_form() {
    let q = fairfl::theory::QuadraticFederation::random(4, 3, 21);
    let fed = q.federation();
    let x = gaussian(6, 0, 3, 1.0);
    let losses = fed.snapshot(&x).client_losses().unwrap();
    for (t, l) in q.terms.iter().zip(losses) {
        let diff: Vec<f64> = x.iter().zip(&t.center).map(|(a, c)| a - c).collect();
        let mut quad = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                quad += diff[r] * t.matrix[r * 3 + c] * diff[c];
            }
        }
        assert!((l - (0.5 * quad + t.offset)).abs() < 1e-12);
    }
}

#[test]
fn quadratic_minimizer_zeroes_global_gradient() {
    for seed in 0..10 {
        let q = fairfl::theory::QuadraticFederation::random(5, 4, seed);
        let x = q.minimizer().unwrap();
        let g = q.federation().snapshot(&x).f_grad().unwrap();
        assert!(g.norm() <= 1e-10, "seed {seed}: {}", g.norm());
    }
}
