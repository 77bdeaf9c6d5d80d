//! Executable checks of the objectives' analytic properties.
//!
//! Each check returns a [`TheoremReport`] that carries its thresholds, seeds
//! and construction parameters, so a failing entry can be replayed from the
//! report alone. Checks never panic on a failed property; they record it.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{gen_synthetic_classification, identical_shards, iid_partition, ClientShard, Split, SplitFractions};
use crate::error::{Error, Result};
use crate::federation::{trajectory, train, AlgorithmConfig, Federation, Method, TrainOptions};
use crate::metrics::evaluate;
use crate::model::{Example, ModelSpec, ParamVector, QuadraticTerm};
use crate::objectives::{loss_variance, norm_sq};
use crate::reduce::ordered_mean;
use crate::rng::{stream, Stream};

/// Convex quadratic clients `f_i(x) = ½ (x − c_i)ᵀ A_i (x − c_i) + b_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFederation {
    pub dim: usize,
    pub terms: Vec<QuadraticTerm>,
}

impl QuadraticFederation {
    pub fn new(dim: usize, terms: Vec<QuadraticTerm>) -> Result<QuadraticFederation> {
        if terms.is_empty() {
            return Err(Error::config("quadratic federation needs at least one client"));
        }
        ModelSpec::Quadratic {
            dim,
            terms: terms.clone(),
        }
        .validate()?;
        Ok(QuadraticFederation { dim, terms })
    }

    /// `A_i = M Mᵀ/d + 0.1 I` with Gaussian `M`, centers `N(0, 4 I)`,
    /// offsets uniform on `[0, 1)`.
    pub fn random(n: usize, dim: usize, seed: u64) -> QuadraticFederation {
        let mut rng = stream(seed, Stream::Theory, ((n as u64) << 32) | dim as u64);
        let terms = (0..n)
            .map(|_| {
                let m = DMatrix::<f64>::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
                let a = &m * m.transpose() / dim as f64 + DMatrix::<f64>::identity(dim, dim) * 0.1;
                let a = (&a + a.transpose()) * 0.5;
                let matrix = (0..dim * dim).map(|k| a[(k / dim, k % dim)]).collect();
                let center = (0..dim).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
                QuadraticTerm {
                    matrix,
                    center,
                    offset: rng.random::<f64>(),
                }
            })
            .collect();
        QuadraticFederation { dim, terms }
    }

    pub fn n(&self) -> usize {
        self.terms.len()
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec::Quadratic {
            dim: self.dim,
            terms: self.terms.clone(),
        }
    }

    /// One example per client selecting its own term, in every split.
    pub fn federation(&self) -> Federation {
        let shards = (0..self.n())
            .map(|i| {
                let ex = vec![Example { features: vec![], label: i }];
                ClientShard {
                    client_id: i,
                    train: ex.clone(),
                    val: ex.clone(),
                    test: ex,
                    train_idx: vec![i],
                    val_idx: vec![i],
                    test_idx: vec![i],
                }
            })
            .collect();
        Federation {
            spec: self.spec(),
            shards,
        }
    }

    /// Solves `Σ A_i (x − c_i) = 0`.
    pub fn minimizer(&self) -> Result<ParamVector> {
        let d = self.dim;
        let mut lhs = DMatrix::<f64>::zeros(d, d);
        let mut rhs = DVector::<f64>::zeros(d);
        for t in &self.terms {
            let a = DMatrix::from_row_slice(d, d, &t.matrix);
            rhs += &a * DVector::from_column_slice(&t.center);
            lhs += a;
        }
        let x = lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Solve("sum of client matrices is singular".into()))?;
        Ok(ParamVector(x.iter().copied().collect()))
    }

    /// Sets offsets so every `f_i(x)` equals the largest of them, keeping
    /// offsets non-negative.
    pub fn equalize_offsets(&mut self, x: &[f64]) {
        let quad: Vec<f64> = self.terms.iter().map(|t| t.value(x) - t.offset).collect();
        let top = quad.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (t, q) in self.terms.iter_mut().zip(quad) {
            t.offset = top - q;
        }
    }

    pub fn with_offsets_shifted(&self, shift: &[f64]) -> QuadraticFederation {
        let mut out = self.clone();
        for (t, s) in out.terms.iter_mut().zip(shift) {
            t.offset += s;
        }
        out
    }

    /// Every `A_i` and `b_i` multiplied by `s ≥ 0`.
    pub fn scaled(&self, s: f64) -> QuadraticFederation {
        let mut out = self.clone();
        for t in &mut out.terms {
            t.matrix.iter_mut().for_each(|v| *v *= s);
            t.offset *= s;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub id: String,
    pub passed: bool,
    pub thresholds: BTreeMap<String, f64>,
    pub measured: BTreeMap<String, f64>,
    pub parameters: Value,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

impl TheoremReport {
    fn new(id: &str, parameters: Value, seeds: Vec<u64>) -> TheoremReport {
        TheoremReport {
            id: id.to_string(),
            passed: true,
            thresholds: BTreeMap::new(),
            measured: BTreeMap::new(),
            parameters,
            seeds,
            failures: Vec::new(),
        }
    }

    fn threshold(&mut self, name: &str, v: f64) {
        self.thresholds.insert(name.into(), v);
    }

    fn measure(&mut self, name: &str, v: f64) {
        self.measured.insert(name.into(), v);
    }

    fn fail(&mut self, why: String) {
        self.passed = false;
        if self.failures.len() < 20 {
            self.failures.push(why);
        }
    }

    fn fail_on_error(id: &str, parameters: Value, seeds: Vec<u64>, e: Error) -> TheoremReport {
        let mut r = TheoremReport::new(id, parameters, seeds);
        r.fail(format!("check aborted: {e}"));
        r
    }
}

/// Deliberate defects used to confirm that the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Uses `−λ` in the loss-surrogate identity.
    FlipLambdaSign,
}

fn gaussian_point(rng: &mut impl Rng, d: usize, scale: f64) -> ParamVector {
    ParamVector((0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// A random federation for identity checks: mostly quadratics, every fourth
/// draw a small softmax-regression federation on synthetic blobs.
fn identity_federation(seed: u64, trial: u64) -> Result<(Federation, f64)> {
    let mut rng = stream(seed, Stream::Theory, trial);
    let n = rng.random_range(2..=8);
    if trial % 4 == 3 {
        let (c, d) = (3, 4);
        let pool = gen_synthetic_classification(n * 12, c, d, 2.0, seed ^ trial)?;
        let shards = iid_partition(&pool, n, &SplitFractions::default(), seed ^ trial)?;
        let fed = Federation::new(
            ModelSpec::MultinomialLogistic {
                input_dim: d,
                num_classes: c,
            },
            shards,
        )?;
        Ok((fed, 0.5))
    } else {
        let d = rng.random_range(1..=6);
        Ok((QuadraticFederation::random(n, d, seed.wrapping_add(trial)).federation(), 1.0))
    }
}

/// Residuals of the loss-surrogate identity
/// `L_λ(x) − ā_λ(x) = −(λ/2)(F(x) − a)²` and its gradient counterpart
/// `∇L_λ(x) − ḡ_λ(x) = −λ (F(x) − a)(∇F(x) − g)` with
/// `(a, g) = (F(x_prev), ∇F(x_prev))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityResiduals {
    /// `|L − ā + (λ/2)(F − a)²| / (1 + |L|)`.
    pub value: f64,
    /// Max-entry gradient residual over `1 + ‖∇L‖∞`.
    pub grad: f64,
    /// `L − ā` (must be `≤ 0`).
    pub gap: f64,
    pub scale: f64,
}

pub fn loss_surrogate_residuals(
    fed: &Federation,
    lambda: f64,
    x: &ParamVector,
    x_prev: &ParamVector,
    fault: Option<Fault>,
) -> Result<IdentityResiduals> {
    let prev = fed.snapshot(x_prev);
    let a = prev.f_value()?;
    let g = prev.f_grad()?;
    let snap = fed.snapshot(x);
    let f = snap.f_value()?;
    let gf = snap.f_grad()?;
    let l = snap.l_lambda(lambda)?;
    let a_bar = snap.surrogate_loss_l(lambda, a)?;
    let gl = snap.l_lambda_grad(lambda)?;
    let g_bar = snap.surrogate_grad_l(lambda, a, &g)?;
    let lam = if fault == Some(Fault::FlipLambdaSign) { -lambda } else { lambda };
    let value = (l - a_bar + 0.5 * lam * (f - a) * (f - a)).abs() / (1.0 + l.abs());
    let predicted: Vec<f64> = gf.iter().zip(g.iter()).map(|(gk, pk)| -lam * (f - a) * (gk - pk)).collect();
    let diff: Vec<f64> = gl.iter().zip(g_bar.iter()).map(|(x, y)| x - y).collect();
    let grad = max_abs_diff(&diff, &predicted) / (1.0 + gl.max_abs());
    Ok(IdentityResiduals {
        value,
        grad,
        gap: (l - a_bar) / (1.0 + l.abs()),
        scale: 1.0 + l.abs(),
    })
}

/// Gradient-surrogate analogue with `J_γ`, `ā_γ`, `ḡ_γ`:
/// `J − ā = −(γ/2)‖∇F − g‖²` and `∇J − ḡ = −γ H̄ (∇F − g)`.
pub fn grad_surrogate_residuals(fed: &Federation, gamma: f64, x: &ParamVector, x_prev: &ParamVector) -> Result<IdentityResiduals> {
    let g = fed.snapshot(x_prev).f_grad()?;
    let snap = fed.snapshot(x);
    let gf = snap.f_grad()?;
    let j = snap.j_gamma(gamma)?;
    let a_bar = snap.surrogate_loss_j(gamma, &g)?;
    let dg = gf.sub(&g);
    let value = (j - a_bar + 0.5 * gamma * norm_sq(&dg)).abs() / (1.0 + j.abs());
    let gj = snap.j_gamma_grad(gamma)?;
    let g_bar = snap.surrogate_grad_j(gamma, &g)?;
    let hbar = snap.mean_hvp(&dg)?;
    let predicted = hbar.scaled(-gamma);
    let diff: Vec<f64> = gj.iter().zip(g_bar.iter()).map(|(x, y)| x - y).collect();
    let grad = max_abs_diff(&diff, &predicted) / (1.0 + gj.max_abs());
    Ok(IdentityResiduals {
        value,
        grad,
        gap: (j - a_bar) / (1.0 + j.abs()),
        scale: 1.0 + j.abs(),
    })
}

pub const IDENTITY_TOL: f64 = 1e-12;

fn identity_check(id: &str, trials: usize, seed: u64, fault: Option<Fault>, loss_kind: bool) -> TheoremReport {
    let params = json!({ "trials": trials, "x_scale": "N(0, s^2) per coordinate", "first_trial_equal_iterates": true });
    let mut report = TheoremReport::new(id, params, vec![seed]);
    report.threshold("scaled_value_residual", IDENTITY_TOL);
    report.threshold("scaled_grad_residual", IDENTITY_TOL);
    let results: Vec<Result<(f64, IdentityResiduals)>> = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let (fed, scale) = identity_federation(seed, trial)?;
            let mut rng = stream(seed ^ 0x5EED, Stream::Theory, trial);
            let d = fed.spec.param_count();
            let x = gaussian_point(&mut rng, d, scale);
            // The first draw checks the equal-iterate case.
            let x_prev = if trial == 0 { x.clone() } else { gaussian_point(&mut rng, d, scale) };
            let p = if trial == 1 { 0.0 } else { rng.random_range(0.0..5.0) };
            let r = if loss_kind {
                loss_surrogate_residuals(&fed, p, &x, &x_prev, fault)?
            } else {
                grad_surrogate_residuals(&fed, p, &x, &x_prev)?
            };
            Ok((p, r))
        })
        .collect();
    let (mut max_v, mut max_g, mut max_gap) = (0.0f64, 0.0f64, f64::NEG_INFINITY);
    for (trial, res) in results.into_iter().enumerate() {
        match res {
            Err(e) => report.fail(format!("trial {trial}: {e}")),
            Ok((p, r)) => {
                max_v = max_v.max(r.value);
                max_g = max_g.max(r.grad);
                max_gap = max_gap.max(r.gap);
                if r.value > IDENTITY_TOL || r.grad > IDENTITY_TOL {
                    report.fail(format!(
                        "trial {trial} (parameter {p}): value residual {:e}, grad residual {:e}",
                        r.value, r.grad
                    ));
                }
                if r.gap > IDENTITY_TOL {
                    report.fail(format!("trial {trial}: objective exceeds surrogate by {:e}", r.gap));
                }
                if trial == 0 && r.gap.abs() > IDENTITY_TOL {
                    report.fail(format!("equal iterates left gap {:e}", r.gap));
                }
            }
        }
    }
    report.measure("max_scaled_value_residual", max_v);
    report.measure("max_scaled_grad_residual", max_g);
    report.measure("max_scaled_gap", max_gap);
    report.measure("trials", trials as f64);
    report
}

/// Loss-variance objective vs its stale-average surrogate on random
/// federations and point pairs.
pub fn check_loss_surrogate_identity(trials: usize, seed: u64, fault: Option<Fault>) -> TheoremReport {
    identity_check("loss-surrogate-identity", trials, seed, fault, true)
}

/// Gradient-variance objective vs its stale-average surrogate.
pub fn check_grad_surrogate_identity(trials: usize, seed: u64) -> TheoremReport {
    identity_check("grad-surrogate-identity", trials, seed, None, false)
}

/// `H_1(x) ≤ L_{n/(n−1)}(x)` whenever every client loss lies in `[0, 1]`.
///
/// Each trial draws a quadratic federation and a point, then rescales the
/// federation so the largest client loss equals `u ~ U(0, 1]`.
pub fn check_qffl_variance_bound(trials: usize, seed: u64) -> TheoremReport {
    let mut report = TheoremReport::new(
        "qffl-variance-bound",
        json!({ "trials": trials, "n_range": [2, 10], "d_range": [1, 5], "loss_range": [0.0, 1.0] }),
        vec![seed],
    );
    report.threshold("slack", IDENTITY_TOL);
    let results: Vec<Result<(f64, f64, f64)>> = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut rng = stream(seed, Stream::Theory, trial);
            let n = rng.random_range(2..=10usize);
            let d = rng.random_range(1..=5usize);
            let base = QuadraticFederation::random(n, d, seed.wrapping_add(trial));
            let x = gaussian_point(&mut rng, d, 2.0);
            let raw = base.federation().snapshot(&x).client_losses()?;
            let top = raw.iter().copied().fold(0.0, f64::max);
            let u = if trial % 10 == 0 { 1.0 } else { 1.0 - rng.random::<f64>() };
            let fed = base.scaled(if top > 0.0 { u / top } else { 1.0 }).federation();
            let snap = fed.snapshot(&x);
            let losses = snap.client_losses()?;
            let max_loss = losses.iter().copied().fold(0.0, f64::max);
            let h1 = snap.h_q_value(1.0, &crate::objectives::QWeights::Uniform)?;
            let l = snap.l_lambda(n as f64 / (n as f64 - 1.0))?;
            Ok((h1, l, max_loss))
        })
        .collect();
    let (mut violations, mut min_slack, mut max_loss) = (0usize, f64::INFINITY, 0.0f64);
    for (trial, r) in results.into_iter().enumerate() {
        match r {
            Err(e) => report.fail(format!("trial {trial}: {e}")),
            Ok((h1, l, ml)) => {
                max_loss = max_loss.max(ml);
                min_slack = min_slack.min(l - h1);
                if ml > 1.0 + 1e-15 {
                    report.fail(format!("trial {trial}: loss {ml} outside [0, 1]"));
                }
                if h1 > l + IDENTITY_TOL {
                    violations += 1;
                    report.fail(format!("trial {trial}: H_1 = {h1} > L = {l}"));
                }
            }
        }
    }
    report.measure("violations", violations as f64);
    report.measure("min_slack", min_slack);
    report.measure("max_client_loss", max_loss);
    report
}

/// Three unit quadratics with centers at 90°, 210° and 330° on the unit
/// circle. The minimizer is the origin, every client loss there is `½`, and
/// every client gradient has norm 1.
pub fn shipped_offset_instance() -> QuadraticFederation {
    let terms = [90.0f64, 210.0, 330.0]
        .iter()
        .map(|deg| {
            let r = deg.to_radians();
            QuadraticTerm {
                matrix: vec![1.0, 0.0, 0.0, 1.0],
                center: vec![r.cos(), r.sin()],
                offset: 0.0,
            }
        })
        .collect();
    QuadraticFederation { dim: 2, terms }
}

pub const OFFSET_REL_TOL: f64 = 1e-10;
pub const OFFSET_MIN_NORM: f64 = 1e-3;

/// Mean-zero loss offsets that move the stationary point of `L_λ` away from
/// the minimizer of `F`.
///
/// After equalizing `f_i(x⋆)`, clients with nonzero `∇f_i(x⋆)` are ordered
/// by index; all clients get offset `1` except the last such client `m`,
/// which gets `−(n − 1)`. Then `∇L̂_λ(x⋆) = (λ/n)(o_m − 1)∇f_m(x⋆)`.
pub fn construct_offset_counterexample(base: &QuadraticFederation, lambda: f64) -> TheoremReport {
    let params = json!({ "n": base.n(), "dim": base.dim, "lambda": lambda, "federation": base });
    let id = "offset-counterexample";
    match offset_counterexample_inner(base, lambda, id, params.clone()) {
        Ok(r) => r,
        Err(e) => TheoremReport::fail_on_error(id, params, vec![], e),
    }
}

fn offset_counterexample_inner(base: &QuadraticFederation, lambda: f64, id: &str, params: Value) -> Result<TheoremReport> {
    let mut report = TheoremReport::new(id, params, vec![]);
    report.threshold("relative_error", OFFSET_REL_TOL);
    report.threshold("min_norm", OFFSET_MIN_NORM);
    report.threshold("control_norm", OFFSET_REL_TOL);
    if lambda.is_nan() || lambda <= 0.0 {
        return Err(Error::config("offset construction needs λ > 0"));
    }
    let n = base.n();
    let x_star = base.minimizer()?;
    let mut eq = base.clone();
    eq.equalize_offsets(&x_star);
    let fed = eq.federation();
    let snap = fed.snapshot(&x_star);
    let stats = snap.client_stats()?;
    let f_spread = stats.losses.iter().fold(0.0f64, |m, l| m.max((l - stats.mean_loss()).abs()));
    let grad_scale = stats.grads.iter().fold(0.0f64, |m, g| m.max(g.norm()));
    report.measure("equalized_loss_spread", f_spread);
    report.measure("grad_f_norm_at_minimizer", stats.mean_grad().norm());
    if f_spread > 1e-12 * (1.0 + stats.mean_loss().abs()) {
        return Err(Error::config(format!("client losses at the minimizer differ by {f_spread:e}")));
    }
    let nonzero: Vec<usize> = (0..n).filter(|&i| stats.grads[i].norm() > 1e-9 * grad_scale.max(1e-300)).collect();
    if grad_scale == 0.0 || nonzero.len() < 2 {
        return Err(Error::config("every client gradient vanishes at the minimizer"));
    }

    let control = snap.l_lambda_grad(lambda)?.norm();
    report.measure("control_norm", control);
    if control > OFFSET_REL_TOL {
        report.fail(format!("zero offsets give gradient norm {control:e}"));
        return Ok(report);
    }

    let m = *nonzero.last().expect("two or more");
    let mut offsets = vec![1.0; n];
    offsets[m] = -((n - 1) as f64);
    let shifted = eq.with_offsets_shifted(&offsets).federation();
    let measured = shifted.snapshot(&x_star).l_lambda_grad(lambda)?.norm();
    let closed = lambda / n as f64 * (offsets[m] - 1.0).abs() * stats.grads[m].norm();
    let rel = (measured - closed).abs() / closed;
    report.parameters["offsets"] = json!(offsets);
    report.parameters["m"] = json!(m);
    report.measure("measured_norm", measured);
    report.measure("closed_form_norm", closed);
    report.measure("relative_error", rel);
    if rel > OFFSET_REL_TOL {
        report.fail(format!("measured {measured} vs closed form {closed}"));
    }
    if measured <= OFFSET_MIN_NORM {
        report.fail(format!("gradient norm {measured:e} is not clearly nonzero"));
    }
    let k = 3.0;
    let scaled = shifted.snapshot(&x_star).l_lambda_grad(k * lambda)?.norm();
    let lin = (scaled - k * measured).abs() / (k * measured);
    report.measure("lambda_scaling_relative_error", lin);
    if lin > OFFSET_REL_TOL {
        report.fail(format!("scaling λ by {k} scaled the norm by {}", scaled / measured));
    }
    Ok(report)
}

/// Outcome of minimizing `L_λ` from the minimizer of `F`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReduction {
    pub var_at_f_min: f64,
    pub var_at_l_min: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Gradient norms every 1000 iterations.
    pub trace: Vec<f64>,
}

pub const GD_GRAD_TOL: f64 = 1e-9;
const GD_MAX_ITERS: usize = 200_000;

/// Gradient descent on `L_λ` from `x⋆` with Armijo backtracking by halving.
pub fn minimize_l_lambda(fed: &QuadraticFederation, lambda: f64) -> Result<VarianceReduction> {
    let x_star = fed.minimizer()?;
    let federation = fed.federation();
    let var_star = loss_variance(&federation.snapshot(&x_star).client_losses()?);
    let mut x = x_star;
    let mut step = 1.0;
    let mut trace = Vec::new();
    let mut iterations = 0;
    let (mut value, mut grad) = {
        let s = federation.snapshot(&x);
        (s.l_lambda(lambda)?, s.l_lambda_grad(lambda)?)
    };
    while grad.norm() > GD_GRAD_TOL && iterations < GD_MAX_ITERS {
        if iterations % 1000 == 0 {
            trace.push(grad.norm());
        }
        let g2 = norm_sq(&grad);
        let mut accepted = false;
        for _ in 0..60 {
            let mut cand = x.clone();
            cand.axpy(-step, &grad);
            let s = federation.snapshot(&cand);
            let v = s.l_lambda(lambda)?;
            let sufficient = v <= value - 0.5 * step * g2;
            // Near the optimum the decrease drops below the resolution of
            // `L`; then a step that keeps `L` level and shrinks the gradient
            // still makes progress.
            let level = v <= value + 4.0 * f64::EPSILON * value.abs();
            if sufficient || level {
                let cand_grad = s.l_lambda_grad(lambda)?;
                if sufficient || cand_grad.norm() < grad.norm() {
                    grad = cand_grad;
                    x = cand;
                    value = v;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
        step *= 1.5;
    }
    let var_l = loss_variance(&federation.snapshot(&x).client_losses()?);
    let grad_norm = grad.norm();
    trace.push(grad_norm);
    Ok(VarianceReduction {
        var_at_f_min: var_star,
        var_at_l_min: var_l,
        grad_norm,
        iterations,
        converged: grad_norm <= GD_GRAD_TOL,
        trace,
    })
}

/// Loss variance at a stationary point of `L_λ` reached from `x⋆` is no
/// larger than at `x⋆`.
pub fn check_variance_reduction(fed: &QuadraticFederation, lambda: f64, tol: f64) -> TheoremReport {
    let params = json!({ "n": fed.n(), "dim": fed.dim, "lambda": lambda });
    let mut report = TheoremReport::new("variance-reduction", params.clone(), vec![]);
    report.threshold("variance_slack", tol);
    report.threshold("grad_norm", GD_GRAD_TOL);
    match minimize_l_lambda(fed, lambda) {
        Err(e) => TheoremReport::fail_on_error("variance-reduction", params, vec![], e),
        Ok(r) => {
            report.measure("var_at_f_min", r.var_at_f_min);
            report.measure("var_at_l_min", r.var_at_l_min);
            report.measure("grad_norm", r.grad_norm);
            report.measure("iterations", r.iterations as f64);
            if !r.converged {
                report.fail(format!("descent stalled at gradient norm {:e}; trace {:?}", r.grad_norm, r.trace));
            }
            if r.var_at_l_min > r.var_at_f_min + tol {
                report.fail(format!("variance rose from {:e} to {:e}", r.var_at_f_min, r.var_at_l_min));
            }
            report
        }
    }
}

pub const VR_TOL: f64 = 1e-8;

/// `cases` random federations with `n ∈ {2, 5, 10}`, `d ∈ {2, 10}` and
/// log-uniform `λ ∈ [0.1, 10]`.
pub fn check_variance_reduction_suite(cases: usize, seed: u64) -> TheoremReport {
    let mut report = TheoremReport::new(
        "variance-reduction",
        json!({ "cases": cases, "n": [2, 5, 10], "dim": [2, 10], "lambda": "log-uniform [0.1, 10]" }),
        vec![seed],
    );
    report.threshold("variance_slack", VR_TOL);
    report.threshold("grad_norm", GD_GRAD_TOL);
    let sub: Vec<TheoremReport> = (0..cases as u64)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(seed, Stream::Theory, 1_000_000 + c);
            let n = [2, 5, 10][rng.random_range(0..3)];
            let d = [2, 10][rng.random_range(0..2)];
            let lambda = 10f64.powf(rng.random_range(-1.0..1.0));
            let fed = QuadraticFederation::random(n, d, seed.wrapping_mul(31).wrapping_add(c));
            check_variance_reduction(&fed, lambda, VR_TOL)
        })
        .collect();
    let passed = sub.iter().filter(|r| r.passed).count();
    let worst_grad = sub.iter().filter_map(|r| r.measured.get("grad_norm")).fold(0.0f64, |m, &v| m.max(v));
    let worst_rise = sub
        .iter()
        .filter_map(|r| Some(r.measured.get("var_at_l_min")? - r.measured.get("var_at_f_min")?))
        .fold(f64::NEG_INFINITY, f64::max);
    report.measure("cases_passed", passed as f64);
    report.measure("cases", cases as f64);
    report.measure("max_grad_norm", worst_grad);
    report.measure("max_variance_change", worst_rise);
    for (c, r) in sub.iter().enumerate() {
        if !r.passed {
            report.fail(format!("case {c} {}: {}", r.parameters, r.failures.join("; ")));
        }
    }
    report
}

/// Settings for the homogeneous-federation comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentSetup {
    pub pool_size: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub spread: f64,
    pub n_clients: usize,
    pub lr: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub max_gap_pp: f64,
}

impl Default for AlignmentSetup {
    fn default() -> Self {
        AlignmentSetup {
            pool_size: 1200,
            num_classes: 4,
            input_dim: 8,
            spread: 0.8,
            n_clients: 10,
            lr: 0.5,
            lambda: 1.0,
            gamma: 1.0,
            max_gap_pp: 2.0,
        }
    }
}

fn alignment_federation(setup: &AlignmentSetup, seed: u64, identical: bool) -> Result<Federation> {
    let pool = gen_synthetic_classification(setup.pool_size, setup.num_classes, setup.input_dim, setup.spread, seed)?;
    let split = SplitFractions::default();
    let shards = if identical {
        identical_shards(&pool, setup.n_clients, &split, seed)?
    } else {
        iid_partition(&pool, setup.n_clients, &split, seed)?
    };
    Federation::new(
        ModelSpec::MultinomialLogistic {
            input_dim: setup.input_dim,
            num_classes: setup.num_classes,
        },
        shards,
    )
}

/// On IID clients, regularized training lands within `max_gap_pp`
/// percentage points of FedAvg's final mean test accuracy, averaged over
/// seeds. With identical shards the exact variants reproduce FedAvg bit for
/// bit.
pub fn check_homogeneous_alignment(seeds: &[u64], rounds: usize, setup: &AlignmentSetup) -> TheoremReport {
    let id = "homogeneous-alignment";
    let params = json!({ "rounds": rounds, "setup": setup });
    match alignment_inner(seeds, rounds, setup, id, params.clone()) {
        Ok(r) => r,
        Err(e) => TheoremReport::fail_on_error(id, params, seeds.to_vec(), e),
    }
}

fn alignment_inner(seeds: &[u64], rounds: usize, setup: &AlignmentSetup, id: &str, params: Value) -> Result<TheoremReport> {
    let mut report = TheoremReport::new(id, params, seeds.to_vec());
    report.threshold("max_mean_abs_gap_pp", setup.max_gap_pp);
    let methods = [
        (Method::FairLoss, setup.lambda),
        (Method::FairGrad, setup.gamma),
    ];
    let final_acc = |fed: &Federation, cfg: &AlgorithmConfig| -> Result<f64> {
        let opts = TrainOptions {
            skip_eval: true,
            ..TrainOptions::default()
        };
        let rec = train(cfg, fed, &opts)?;
        Ok(evaluate(&fed.snapshot(&rec.final_x), Split::Test)?.mean_acc)
    };
    let per_seed: Vec<Result<Vec<f64>>> = seeds
        .par_iter()
        .map(|&seed| {
            let fed = alignment_federation(setup, seed, false)?;
            let base = final_acc(&fed, &AlgorithmConfig::fedavg(setup.lr, rounds).with_seed(seed))?;
            let mut gaps = vec![base];
            for (m, p) in methods {
                let acc = final_acc(&fed, &AlgorithmConfig::new(m, p, setup.lr, rounds).with_seed(seed))?;
                gaps.push(100.0 * (acc - base));
            }
            Ok(gaps)
        })
        .collect();
    let per_seed: Vec<Vec<f64>> = per_seed.into_iter().collect::<Result<_>>()?;
    report.measure(
        "fedavg_mean_test_acc",
        ordered_mean(&per_seed.iter().map(|g| g[0]).collect::<Vec<_>>()),
    );
    for (k, (m, _)) in methods.iter().enumerate() {
        let gaps: Vec<f64> = per_seed.iter().map(|g| g[k + 1].abs()).collect();
        let mean_gap = ordered_mean(&gaps);
        report.measure(&format!("{}_mean_abs_gap_pp", m.name()), mean_gap);
        if mean_gap > setup.max_gap_pp {
            report.fail(format!("{m}: mean |Δacc| = {mean_gap:.3} pp"));
        }
    }

    // Exact homogeneity: zero deviations make the exact variants FedAvg.
    let seed = seeds.first().copied().unwrap_or(0);
    let fed = alignment_federation(setup, seed, true)?;
    let x0 = fed.spec.init_params(seed);
    let short = rounds.min(20);
    let reference = trajectory(&AlgorithmConfig::fedavg(setup.lr, short), &fed, x0.clone())?;
    for (m, p) in [(Method::FairLossExact, setup.lambda), (Method::FairGradExact, setup.gamma)] {
        let tr = trajectory(&AlgorithmConfig::new(m, p, setup.lr, short), &fed, x0.clone())?;
        let same = tr == reference;
        report.measure(&format!("{}_identical_shards_bitwise", m.name()), if same { 1.0 } else { 0.0 });
        if !same {
            report.fail(format!("{m} diverged from FedAvg on identical shards"));
        }
    }
    Ok(report)
}

/// Identifiers of every check in [`run_suite`].
pub const SUITE_IDS: [&str; 6] = [
    "grad-surrogate-identity",
    "homogeneous-alignment",
    "loss-surrogate-identity",
    "offset-counterexample",
    "qffl-variance-bound",
    "variance-reduction",
];

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    /// Keep checks whose id contains this string.
    pub filter: Option<String>,
    pub fault: Option<Fault>,
    pub seed: u64,
}

/// Runs the selected checks in parallel; reports come back sorted by id.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<TheoremReport>> {
    let ids: Vec<&str> = SUITE_IDS
        .iter()
        .copied()
        .filter(|id| opts.filter.as_deref().is_none_or(|f| id.contains(f)))
        .collect();
    if ids.is_empty() {
        return Err(Error::config(format!(
            "filter {:?} matches no check; known ids: {}",
            opts.filter,
            SUITE_IDS.join(", ")
        )));
    }
    let seed = opts.seed;
    let mut reports: Vec<TheoremReport> = ids
        .par_iter()
        .map(|&id| match id {
            "loss-surrogate-identity" => check_loss_surrogate_identity(1000, seed, opts.fault),
            "grad-surrogate-identity" => check_grad_surrogate_identity(1000, seed),
            "qffl-variance-bound" => check_qffl_variance_bound(1000, seed),
            "offset-counterexample" => construct_offset_counterexample(&shipped_offset_instance(), 1.0),
            "variance-reduction" => check_variance_reduction_suite(50, seed),
            "homogeneous-alignment" => {
                let seeds: Vec<u64> = (0..5).map(|k| seed.wrapping_add(k)).collect();
                check_homogeneous_alignment(&seeds, 200, &AlignmentSetup::default())
            }
            _ => unreachable!("listed in SUITE_IDS"),
        })
        .collect();
    reports.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(reports)
}
