//! Differentiable toy models.
//!
//! Every model exposes the mean loss over a batch, its analytic gradient and
//! a Hessian-vector product that never forms the Hessian. Classification
//! models use softmax cross-entropy with a max-shifted log-sum-exp.

use std::ops::{Add, AddAssign, Deref, DerefMut, Div, Mul, Neg, Sub};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// Dense parameter (or gradient) vector.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(self, other)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self - other`, entrywise.
    pub fn sub(&self, other: &[f64]) -> ParamVector {
        ParamVector(self.iter().zip(other).map(|(a, b)| a - b).collect())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &[f64]) {
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += alpha * b;
        }
    }

    pub fn scaled(&self, alpha: f64) -> ParamVector {
        ParamVector(self.iter().map(|v| alpha * v).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// One labelled sample. For the quadratic model the label selects the
/// quadratic term and `features` is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

/// `½ (x − c)ᵀ A (x − c) + b` with `A` symmetric positive semidefinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticTerm {
    /// Row-major `d × d` matrix.
    pub matrix: Vec<f64>,
    pub center: Vec<f64>,
    pub offset: f64,
}

impl QuadraticTerm {
    pub fn dim(&self) -> usize {
        self.center.len()
    }

    fn apply(&self, v: &[f64], out: &mut [f64], weight: f64) {
        let d = self.dim();
        for (r, o) in out.iter_mut().enumerate() {
            *o += weight * dot(&self.matrix[r * d..(r + 1) * d], v);
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(&self.center).map(|(a, c)| a - c).collect();
        let mut ad = vec![0.0; diff.len()];
        self.apply(&diff, &mut ad, 1.0);
        0.5 * dot(&diff, &ad) + self.offset
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let diff: Vec<f64> = x.iter().zip(&self.center).map(|(a, c)| a - c).collect();
        let mut out = vec![0.0; diff.len()];
        self.apply(&diff, &mut out, 1.0);
        out
    }

    fn validate(&self, dim: usize, index: usize) -> Result<()> {
        if self.center.len() != dim || self.matrix.len() != dim * dim {
            return Err(Error::Dimension(format!(
                "quadratic term {index}: expected {dim}x{dim} matrix and length-{dim} center"
            )));
        }
        if !self.offset.is_finite() || self.matrix.iter().chain(&self.center).any(|v| !v.is_finite()) {
            return Err(Error::config(format!("quadratic term {index} has non-finite entries")));
        }
        let scale = self.matrix.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        for r in 0..dim {
            for c in 0..r {
                if (self.matrix[r * dim + c] - self.matrix[c * dim + r]).abs() > 1e-12 * scale {
                    return Err(Error::config(format!("quadratic term {index}: matrix is not symmetric")));
                }
            }
        }
        let m = DMatrix::from_row_slice(dim, dim, &self.matrix);
        let min_eig = SymmetricEigen::new(m).eigenvalues.min();
        if min_eig < -1e-10 * scale {
            return Err(Error::config(format!(
                "quadratic term {index}: matrix is not positive semidefinite (min eigenvalue {min_eig:e})"
            )));
        }
        Ok(())
    }
}

/// Model family and its dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Softmax regression; parameters are `C` rows of `input_dim` weights
    /// followed by a bias.
    MultinomialLogistic { input_dim: usize, num_classes: usize },
    /// `tanh` hidden layer then softmax. Layout: `W1 (H×D)`, `b1 (H)`,
    /// `W2 (C×H)`, `b2 (C)`.
    Mlp {
        input_dim: usize,
        hidden: usize,
        num_classes: usize,
    },
    /// One convex quadratic per declared client; `Example::label` picks it.
    Quadratic { dim: usize, terms: Vec<QuadraticTerm> },
}

impl ModelSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            ModelSpec::MultinomialLogistic { input_dim, num_classes } => num_classes * (input_dim + 1),
            ModelSpec::Mlp {
                input_dim,
                hidden,
                num_classes,
            } => hidden * (input_dim + 1) + num_classes * (hidden + 1),
            ModelSpec::Quadratic { dim, .. } => dim,
        }
    }

    /// Feature length expected from examples (0 for quadratics).
    pub fn input_dim(&self) -> usize {
        match *self {
            ModelSpec::MultinomialLogistic { input_dim, .. } | ModelSpec::Mlp { input_dim, .. } => input_dim,
            ModelSpec::Quadratic { .. } => 0,
        }
    }

    /// Number of label values (number of terms for quadratics).
    pub fn num_classes(&self) -> usize {
        match self {
            ModelSpec::MultinomialLogistic { num_classes, .. } | ModelSpec::Mlp { num_classes, .. } => *num_classes,
            ModelSpec::Quadratic { terms, .. } => terms.len(),
        }
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self, ModelSpec::Quadratic { .. })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelSpec::MultinomialLogistic { .. } => "multinomial-logistic",
            ModelSpec::Mlp { .. } => "mlp",
            ModelSpec::Quadratic { .. } => "quadratic",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::MultinomialLogistic { input_dim, num_classes } => {
                if *input_dim == 0 || *num_classes < 2 {
                    return Err(Error::config("logistic model needs input_dim >= 1 and num_classes >= 2"));
                }
            }
            ModelSpec::Mlp {
                input_dim,
                hidden,
                num_classes,
            } => {
                if *input_dim == 0 || *hidden == 0 || *num_classes < 2 {
                    return Err(Error::config("mlp needs input_dim, hidden >= 1 and num_classes >= 2"));
                }
            }
            ModelSpec::Quadratic { dim, terms } => {
                if *dim == 0 || terms.is_empty() {
                    return Err(Error::config("quadratic model needs dim >= 1 and at least one term"));
                }
                for (i, t) in terms.iter().enumerate() {
                    t.validate(*dim, i)?;
                }
            }
        }
        Ok(())
    }

    /// Seeded initial parameters. Quadratics start at the origin.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = stream(seed, Stream::Init, 0);
        match *self {
            ModelSpec::MultinomialLogistic { .. } => {
                ParamVector((0..self.param_count()).map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal)).collect())
            }
            ModelSpec::Mlp {
                input_dim,
                hidden,
                num_classes,
            } => {
                let mut p = vec![0.0; self.param_count()];
                let l = MlpLayout::new(input_dim, hidden, num_classes);
                let s1 = (1.0 / input_dim as f64).sqrt();
                let s2 = (1.0 / hidden as f64).sqrt();
                for v in &mut p[l.w1..l.b1] {
                    *v = s1 * rng.sample::<f64, _>(StandardNormal);
                }
                for v in &mut p[l.w2..l.b2] {
                    *v = s2 * rng.sample::<f64, _>(StandardNormal);
                }
                ParamVector(p)
            }
            ModelSpec::Quadratic { dim, .. } => ParamVector::zeros(dim),
        }
    }

    fn check(&self, x: &[f64], batch: &[Example]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Dimension("empty batch".into()));
        }
        if x.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "{} model expects {} parameters, got {}",
                self.kind_name(),
                self.param_count(),
                x.len()
            )));
        }
        let (dim, classes) = (self.input_dim(), self.num_classes());
        for (j, ex) in batch.iter().enumerate() {
            if ex.features.len() != dim {
                return Err(Error::Dimension(format!(
                    "example {j} has {} features, model expects {dim}",
                    ex.features.len()
                )));
            }
            if ex.label >= classes {
                return Err(Error::Dimension(format!("example {j} label {} >= {classes}", ex.label)));
            }
        }
        Ok(())
    }

    pub fn loss(&self, x: &[f64], batch: &[Example]) -> Result<f64> {
        self.check(x, batch)?;
        let value = match self {
            ModelSpec::MultinomialLogistic { input_dim, num_classes } => logistic_loss(*input_dim, *num_classes, x, batch),
            ModelSpec::Mlp {
                input_dim,
                hidden,
                num_classes,
            } => mlp_forward_loss(MlpLayout::new(*input_dim, *hidden, *num_classes), x, batch),
            ModelSpec::Quadratic { terms, .. } => {
                batch.iter().fold(0.0, |acc, ex| acc + terms[ex.label].value(x)) * (1.0 / batch.len() as f64)
            }
        };
        finite_scalar(value, || format!("{} loss on batch of {}", self.kind_name(), batch.len()))
    }

    pub fn grad(&self, x: &[f64], batch: &[Example]) -> Result<ParamVector> {
        Ok(self.loss_and_grad(x, batch)?.1)
    }

    pub fn loss_and_grad(&self, x: &[f64], batch: &[Example]) -> Result<(f64, ParamVector)> {
        self.check(x, batch)?;
        let (loss, grad) = match self {
            ModelSpec::MultinomialLogistic { input_dim, num_classes } => {
                logistic_loss_grad(*input_dim, *num_classes, x, batch)
            }
            ModelSpec::Mlp {
                input_dim,
                hidden,
                num_classes,
            } => mlp_loss_grad::<f64>(MlpLayout::new(*input_dim, *hidden, *num_classes), x, batch),
            ModelSpec::Quadratic { terms, .. } => {
                let w = 1.0 / batch.len() as f64;
                let mut g = vec![0.0; x.len()];
                let mut loss = 0.0;
                for ex in batch {
                    let term = &terms[ex.label];
                    loss += term.value(x);
                    let diff: Vec<f64> = x.iter().zip(&term.center).map(|(a, c)| a - c).collect();
                    term.apply(&diff, &mut g, w);
                }
                (loss * w, g)
            }
        };
        let ctx = || format!("{} gradient on batch of {}", self.kind_name(), batch.len());
        let loss = finite_scalar(loss, ctx)?;
        let grad = finite_vector(grad, ctx)?;
        Ok((loss, ParamVector(grad)))
    }

    /// `∇²loss(x) · v`.
    pub fn hvp(&self, x: &[f64], v: &[f64], batch: &[Example]) -> Result<ParamVector> {
        self.check(x, batch)?;
        if v.len() != x.len() {
            return Err(Error::Dimension(format!("hvp direction has length {}, expected {}", v.len(), x.len())));
        }
        let out = match self {
            ModelSpec::MultinomialLogistic { input_dim, num_classes } => {
                logistic_hvp(*input_dim, *num_classes, x, v, batch)
            }
            ModelSpec::Mlp {
                input_dim,
                hidden,
                num_classes,
            } => {
                let dual: Vec<Dual> = x.iter().zip(v).map(|(&re, &eps)| Dual { re, eps }).collect();
                let (_, g) = mlp_loss_grad::<Dual>(MlpLayout::new(*input_dim, *hidden, *num_classes), &dual, batch);
                g.into_iter().map(|d| d.eps).collect()
            }
            ModelSpec::Quadratic { terms, .. } => {
                let w = 1.0 / batch.len() as f64;
                let mut out = vec![0.0; x.len()];
                for ex in batch {
                    terms[ex.label].apply(v, &mut out, w);
                }
                out
            }
        };
        Ok(ParamVector(finite_vector(out, || {
            format!("{} hvp on batch of {}", self.kind_name(), batch.len())
        })?))
    }

    /// Arg-max class, or `None` for non-classifiers.
    pub fn predict(&self, x: &[f64], features: &[f64]) -> Option<usize> {
        let logits = match *self {
            ModelSpec::MultinomialLogistic { input_dim, num_classes } => logistic_logits(input_dim, num_classes, x, features),
            ModelSpec::Mlp {
                input_dim,
                hidden,
                num_classes,
            } => {
                let l = MlpLayout::new(input_dim, hidden, num_classes);
                let h = mlp_hidden::<f64>(l, x, features);
                mlp_logits::<f64>(l, x, &h)
            }
            ModelSpec::Quadratic { .. } => return None,
        };
        Some(argmax(&logits))
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = k;
        }
    }
    best
}

fn finite_scalar(v: f64, ctx: impl FnOnce() -> String) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { context: ctx(), round: None })
    }
}

fn finite_vector(v: Vec<f64>, ctx: impl FnOnce() -> String) -> Result<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::NonFinite { context: ctx(), round: None })
    }
}

// ---------------------------------------------------------------------------
// Multinomial logistic regression

fn logistic_logits(dim: usize, classes: usize, x: &[f64], features: &[f64]) -> Vec<f64> {
    let stride = dim + 1;
    (0..classes)
        .map(|k| {
            let row = &x[k * stride..(k + 1) * stride];
            dot(&row[..dim], features) + row[dim]
        })
        .collect()
}

/// Returns `(log-sum-exp, probabilities)` with the max shift applied.
fn softmax(logits: &[f64]) -> (f64, Vec<f64>) {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = m + sum.ln();
    (lse, exps.into_iter().map(|e| e / sum).collect())
}

fn logistic_loss(dim: usize, classes: usize, x: &[f64], batch: &[Example]) -> f64 {
    let total = batch.iter().fold(0.0, |acc, ex| {
        let z = logistic_logits(dim, classes, x, &ex.features);
        let (lse, _) = softmax(&z);
        acc + (lse - z[ex.label])
    });
    total * (1.0 / batch.len() as f64)
}

fn logistic_loss_grad(dim: usize, classes: usize, x: &[f64], batch: &[Example]) -> (f64, Vec<f64>) {
    let stride = dim + 1;
    let mut grad = vec![0.0; x.len()];
    let mut total = 0.0;
    for ex in batch {
        let z = logistic_logits(dim, classes, x, &ex.features);
        let (lse, p) = softmax(&z);
        total += lse - z[ex.label];
        for (k, &pk) in p.iter().enumerate() {
            let coef = pk - if k == ex.label { 1.0 } else { 0.0 };
            let row = &mut grad[k * stride..(k + 1) * stride];
            for (g, a) in row[..dim].iter_mut().zip(&ex.features) {
                *g += coef * a;
            }
            row[dim] += coef;
        }
    }
    let w = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= w);
    (total * w, grad)
}

/// Per example: `u_k = v_k·[a,1]`, `s_k = p_k (u_k − Σ_j p_j u_j)`, row `k`
/// accumulates `s_k [a,1]`.
fn logistic_hvp(dim: usize, classes: usize, x: &[f64], v: &[f64], batch: &[Example]) -> Vec<f64> {
    let stride = dim + 1;
    let mut out = vec![0.0; x.len()];
    for ex in batch {
        let z = logistic_logits(dim, classes, x, &ex.features);
        let (_, p) = softmax(&z);
        let u = logistic_logits(dim, classes, v, &ex.features);
        let pu = dot(&p, &u);
        for k in 0..classes {
            let s = p[k] * (u[k] - pu);
            let row = &mut out[k * stride..(k + 1) * stride];
            for (o, a) in row[..dim].iter_mut().zip(&ex.features) {
                *o += s * a;
            }
            row[dim] += s;
        }
    }
    let w = 1.0 / batch.len() as f64;
    out.iter_mut().for_each(|o| *o *= w);
    out
}

// ---------------------------------------------------------------------------
// One-hidden-layer MLP, written once over a scalar type so the same reverse
// pass yields gradients (f64) and Hessian-vector products (dual numbers).

/// Scalar operations the MLP reverse pass needs.
pub(crate) trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self> + AddAssign
{
    fn constant(v: f64) -> Self;
    fn value(self) -> f64;
    fn scale(self, k: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
}

impl Scalar for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn scale(self, k: f64) -> Self {
        self * k
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// Forward-mode dual number `re + eps·ε`, `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { re: self.re + o.re, eps: self.eps + o.eps }
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.eps += o.eps;
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { re: self.re - o.re, eps: self.eps - o.eps }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            re: self.re * o.re,
            eps: self.re * o.eps + self.eps * o.re,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual {
            re: self.re / o.re,
            eps: (self.eps * o.re - self.re * o.eps) / (o.re * o.re),
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual { re: -self.re, eps: -self.eps }
    }
}

impl Scalar for Dual {
    fn constant(v: f64) -> Self {
        Dual { re: v, eps: 0.0 }
    }
    fn value(self) -> f64 {
        self.re
    }
    fn scale(self, k: f64) -> Self {
        Dual { re: self.re * k, eps: self.eps * k }
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual { re: e, eps: self.eps * e }
    }
    fn ln(self) -> Self {
        Dual { re: self.re.ln(), eps: self.eps / self.re }
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual { re: t, eps: self.eps * (1.0 - t * t) }
    }
}

#[derive(Debug, Clone, Copy)]
struct MlpLayout {
    dim: usize,
    hidden: usize,
    classes: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl MlpLayout {
    fn new(dim: usize, hidden: usize, classes: usize) -> Self {
        let w1 = 0;
        let b1 = w1 + hidden * dim;
        let w2 = b1 + hidden;
        let b2 = w2 + classes * hidden;
        MlpLayout {
            dim,
            hidden,
            classes,
            w1,
            b1,
            w2,
            b2,
        }
    }
}

fn mlp_hidden<S: Scalar>(l: MlpLayout, p: &[S], a: &[f64]) -> Vec<S> {
    (0..l.hidden)
        .map(|j| {
            let row = &p[l.w1 + j * l.dim..l.w1 + (j + 1) * l.dim];
            let mut pre = p[l.b1 + j];
            for (w, &ad) in row.iter().zip(a) {
                pre += w.scale(ad);
            }
            pre.tanh()
        })
        .collect()
}

fn mlp_logits<S: Scalar>(l: MlpLayout, p: &[S], h: &[S]) -> Vec<S> {
    (0..l.classes)
        .map(|k| {
            let row = &p[l.w2 + k * l.hidden..l.w2 + (k + 1) * l.hidden];
            let mut z = p[l.b2 + k];
            for (&w, &hj) in row.iter().zip(h) {
                z += w * hj;
            }
            z
        })
        .collect()
}

/// `(lse, probabilities)`; the shift is a constant, which leaves
/// derivatives unchanged.
fn softmax_generic<S: Scalar>(z: &[S]) -> (S, Vec<S>) {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, b| a.max(b.value()));
    let shift = S::constant(m);
    let exps: Vec<S> = z.iter().map(|&zk| (zk - shift).exp()).collect();
    let mut sum = S::constant(0.0);
    for &e in &exps {
        sum += e;
    }
    let lse = shift + sum.ln();
    (lse, exps.into_iter().map(|e| e / sum).collect())
}

fn mlp_forward_loss(l: MlpLayout, p: &[f64], batch: &[Example]) -> f64 {
    let total = batch.iter().fold(0.0, |acc, ex| {
        let h = mlp_hidden(l, p, &ex.features);
        let z = mlp_logits(l, p, &h);
        let (lse, _) = softmax_generic(&z);
        acc + (lse - z[ex.label])
    });
    total * (1.0 / batch.len() as f64)
}

fn mlp_loss_grad<S: Scalar>(l: MlpLayout, p: &[S], batch: &[Example]) -> (S, Vec<S>) {
    let zero = S::constant(0.0);
    let mut grad = vec![zero; p.len()];
    let mut total = zero;
    for ex in batch {
        let a = &ex.features;
        let h = mlp_hidden(l, p, a);
        let z = mlp_logits(l, p, &h);
        let (lse, prob) = softmax_generic(&z);
        total += lse - z[ex.label];

        let mut dh = vec![zero; l.hidden];
        for k in 0..l.classes {
            let dz = if k == ex.label { prob[k] - S::constant(1.0) } else { prob[k] };
            grad[l.b2 + k] += dz;
            for j in 0..l.hidden {
                let w = l.w2 + k * l.hidden + j;
                grad[w] += dz * h[j];
                dh[j] += p[w] * dz;
            }
        }
        for j in 0..l.hidden {
            let dpre = dh[j] * (S::constant(1.0) - h[j] * h[j]);
            grad[l.b1 + j] += dpre;
            let base = l.w1 + j * l.dim;
            for (d, &ad) in a.iter().enumerate() {
                grad[base + d] += dpre.scale(ad);
            }
        }
    }
    let w = 1.0 / batch.len() as f64;
    (total.scale(w), grad.into_iter().map(|g| g.scale(w)).collect())
}
