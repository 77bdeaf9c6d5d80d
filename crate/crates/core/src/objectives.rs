//! Global risk, the fairness objectives and the stale-average surrogates.
//!
//! Notation, for clients `i = 1..n` with local losses `f_i`:
//!
//! * `F = mean f_i`
//! * `L_λ = F + (λ/2n) Σ (f_i − F)²`
//! * `J_γ = F + (γ/2n) Σ ‖∇f_i − ∇F‖²`
//! * `H_q = Σ r_i f_i^{q+1} / (q+1)`
//! * `ā_λ = F + (λ/2n) Σ (f_i − a)²`, `ḡ_λ = ∇F + (λ/n) Σ (f_i − a)(∇f_i − g)`
//! * `ā_γ = F + (γ/2n) Σ ‖∇f_i − g‖²`, `ḡ_γ = ∇F + (γ/n) Σ ∇²f_i (∇f_i − g)`
//!
//! where `a`, `g` are the averages broadcast by the server. Per-client work
//! runs on the current rayon pool; every reduction uses
//! [`crate::reduce`] in client order.

use std::borrow::Cow;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ClientShard;
use crate::error::{Error, Result};
use crate::model::{Example, ModelSpec, ParamVector};
use crate::reduce::{ordered_mean, ordered_mean_vec};
use crate::rng::{stream, Stream};

/// How a client picks the examples it differentiates in a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BatchPolicy {
    #[default]
    Full,
    /// Epoch-wise shuffled cursor; round `t` reads positions
    /// `[t·size, (t+1)·size)` of the concatenated per-epoch permutations.
    MiniBatch { size: usize, seed: u64 },
}

impl BatchPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            BatchPolicy::MiniBatch { size: 0, .. } => Err(Error::config("mini-batch size must be positive")),
            _ => Ok(()),
        }
    }
}

/// Training examples of client `client` used at `round`.
pub fn client_batch<'a>(shard: &'a ClientShard, policy: BatchPolicy, client: usize, round: usize) -> Cow<'a, [Example]> {
    match policy {
        BatchPolicy::Full => Cow::Borrowed(&shard.train),
        BatchPolicy::MiniBatch { size, seed } => {
            let n = shard.train.len();
            if size >= n {
                return Cow::Borrowed(&shard.train);
            }
            let start = round * size;
            let mut epoch_perm: Option<(usize, Vec<usize>)> = None;
            let batch = (start..start + size)
                .map(|pos| {
                    let epoch = pos / n;
                    if epoch_perm.as_ref().map(|(e, _)| *e) != Some(epoch) {
                        let mut perm: Vec<usize> = (0..n).collect();
                        let index = ((client as u64) << 32) ^ epoch as u64;
                        perm.shuffle(&mut stream(seed, Stream::MiniBatch, index));
                        epoch_perm = Some((epoch, perm));
                    }
                    let perm = &epoch_perm.as_ref().expect("set above").1;
                    shard.train[perm[pos % n]].clone()
                })
                .collect();
            Cow::Owned(batch)
        }
    }
}

/// Client losses and gradients at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientStats {
    pub losses: Vec<f64>,
    pub grads: Vec<ParamVector>,
}

impl ClientStats {
    pub fn n(&self) -> usize {
        self.losses.len()
    }

    pub fn mean_loss(&self) -> f64 {
        ordered_mean(&self.losses)
    }

    pub fn mean_grad(&self) -> ParamVector {
        ParamVector(ordered_mean_vec(&self.grads))
    }
}

/// Loss-variance surrogate `ā_λ` from client losses.
pub fn loss_surrogate_value(losses: &[f64], lambda: f64, a: f64) -> f64 {
    let f = ordered_mean(losses);
    if lambda == 0.0 {
        return f;
    }
    let sq: Vec<f64> = losses.iter().map(|&l| (l - a) * (l - a)).collect();
    f + 0.5 * lambda * ordered_mean(&sq)
}

/// Loss-variance surrogate gradient `ḡ_λ`.
pub fn loss_surrogate_grad(stats: &ClientStats, lambda: f64, a: f64, g: &[f64]) -> ParamVector {
    let mut out = stats.mean_grad();
    if lambda == 0.0 {
        return out;
    }
    let terms: Vec<Vec<f64>> = stats
        .losses
        .iter()
        .zip(&stats.grads)
        .map(|(&l, gi)| gi.iter().zip(g).map(|(gk, bk)| (l - a) * (gk - bk)).collect())
        .collect();
    out.axpy(lambda, &ordered_mean_vec(&terms));
    out
}

/// Gradient-variance surrogate `ā_γ` from client gradients.
pub fn grad_surrogate_value(stats: &ClientStats, gamma: f64, g: &[f64]) -> f64 {
    let f = stats.mean_loss();
    if gamma == 0.0 {
        return f;
    }
    let sq: Vec<f64> = stats
        .grads
        .iter()
        .map(|gi| gi.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    f + 0.5 * gamma * ordered_mean(&sq)
}

/// Weights `r_i` of the q-FFL objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum QWeights {
    /// `r_i = 1/n`.
    #[default]
    Uniform,
    /// `r_i = N_i / Σ N_j`.
    DataProportional,
    Explicit(Vec<f64>),
}

impl QWeights {
    /// Resolved weights, or `None` for the uniform case, which uses the
    /// ordered mean so that `H_0` equals `F` bit for bit.
    pub fn resolve(&self, shards: &[ClientShard]) -> Result<Option<Vec<f64>>> {
        match self {
            QWeights::Uniform => Ok(None),
            QWeights::DataProportional => {
                let total: usize = shards.iter().map(ClientShard::num_train).sum();
                Ok(Some(shards.iter().map(|s| s.num_train() as f64 / total as f64).collect()))
            }
            QWeights::Explicit(r) => {
                if r.len() != shards.len() {
                    return Err(Error::Dimension(format!("{} q-FFL weights for {} clients", r.len(), shards.len())));
                }
                if r.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
                    return Err(Error::config("q-FFL weights must be non-negative"));
                }
                Ok(Some(r.clone()))
            }
        }
    }
}

/// `f^e` with exact results for `e ∈ {0, 1}` and small integers.
pub(crate) fn pow_exact(f: f64, e: f64) -> f64 {
    if e == 0.0 {
        1.0
    } else if e == 1.0 {
        f
    } else if e.fract() == 0.0 && e.abs() <= 64.0 {
        f.powi(e as i32)
    } else {
        f.powf(e)
    }
}

pub(crate) fn check_q_domain(losses: &[f64], q: f64) -> Result<()> {
    if !(q >= 0.0 && q.is_finite()) {
        return Err(Error::Domain(format!("q must be non-negative, got {q}")));
    }
    if q.fract() != 0.0 {
        if let Some((i, l)) = losses.iter().enumerate().find(|(_, &l)| l < 0.0) {
            return Err(Error::Domain(format!("client {i} loss {l} is negative with fractional q = {q}")));
        }
    }
    Ok(())
}

/// `H_q` from client losses.
pub fn h_q_from_losses(losses: &[f64], q: f64, weights: Option<&[f64]>) -> Result<f64> {
    check_q_domain(losses, q)?;
    let powered: Vec<f64> = losses.iter().map(|&l| pow_exact(l, q + 1.0)).collect();
    let total = match weights {
        None => ordered_mean(&powered),
        Some(r) => r.iter().zip(&powered).fold(0.0, |acc, (w, p)| acc + w * p),
    };
    Ok(total / (q + 1.0))
}

/// A model point evaluated against every client's data.
#[derive(Debug, Clone, Copy)]
pub struct FederationSnapshot<'a> {
    pub shards: &'a [ClientShard],
    pub spec: &'a ModelSpec,
    pub x: &'a ParamVector,
    pub batch: BatchPolicy,
    /// Round index, used by mini-batch cursors.
    pub round: usize,
}

impl<'a> FederationSnapshot<'a> {
    pub fn new(shards: &'a [ClientShard], spec: &'a ModelSpec, x: &'a ParamVector) -> Self {
        FederationSnapshot {
            shards,
            spec,
            x,
            batch: BatchPolicy::Full,
            round: 0,
        }
    }

    pub fn with_batch(self, batch: BatchPolicy, round: usize) -> Self {
        FederationSnapshot { batch, round, ..self }
    }

    /// Same data, different point.
    pub fn at<'b>(&self, x: &'b ParamVector) -> FederationSnapshot<'b>
    where
        'a: 'b,
    {
        FederationSnapshot {
            shards: self.shards,
            spec: self.spec,
            x,
            batch: self.batch,
            round: self.round,
        }
    }

    pub fn n(&self) -> usize {
        self.shards.len()
    }

    pub fn client_batch(&self, i: usize) -> Cow<'a, [Example]> {
        client_batch(&self.shards[i], self.batch, i, self.round)
    }

    pub fn client_hvp(&self, i: usize, v: &[f64]) -> Result<ParamVector> {
        self.spec.hvp(self.x, v, &self.client_batch(i))
    }

    pub fn client_losses(&self) -> Result<Vec<f64>> {
        (0..self.n())
            .into_par_iter()
            .map(|i| self.spec.loss(self.x, &self.client_batch(i)))
            .collect()
    }

    pub fn client_grads(&self) -> Result<Vec<ParamVector>> {
        Ok(self.client_stats()?.grads)
    }

    pub fn client_stats(&self) -> Result<ClientStats> {
        let pairs: Vec<(f64, ParamVector)> = (0..self.n())
            .into_par_iter()
            .map(|i| self.spec.loss_and_grad(self.x, &self.client_batch(i)))
            .collect::<Result<_>>()?;
        let (losses, grads) = pairs.into_iter().unzip();
        Ok(ClientStats { losses, grads })
    }

    /// `[∇²f_i · v_i]` for every client.
    pub fn client_hvps<V: AsRef<[f64]> + Sync>(&self, directions: &[V]) -> Result<Vec<ParamVector>> {
        (0..self.n())
            .into_par_iter()
            .map(|i| self.client_hvp(i, directions[i].as_ref()))
            .collect()
    }

    /// `(1/n) Σ ∇²f_i · v`.
    pub fn mean_hvp(&self, v: &[f64]) -> Result<ParamVector> {
        let all: Vec<ParamVector> = (0..self.n()).into_par_iter().map(|i| self.client_hvp(i, v)).collect::<Result<_>>()?;
        Ok(ParamVector(ordered_mean_vec(&all)))
    }

    pub fn f_value(&self) -> Result<f64> {
        Ok(ordered_mean(&self.client_losses()?))
    }

    pub fn f_grad(&self) -> Result<ParamVector> {
        Ok(self.client_stats()?.mean_grad())
    }

    pub fn l_lambda(&self, lambda: f64) -> Result<f64> {
        check_nonneg("lambda", lambda)?;
        let losses = self.client_losses()?;
        let f = ordered_mean(&losses);
        Ok(loss_surrogate_value(&losses, lambda, f))
    }

    pub fn l_lambda_grad(&self, lambda: f64) -> Result<ParamVector> {
        check_nonneg("lambda", lambda)?;
        let stats = self.client_stats()?;
        let (f, gf) = (stats.mean_loss(), stats.mean_grad());
        Ok(loss_surrogate_grad(&stats, lambda, f, &gf))
    }

    pub fn j_gamma(&self, gamma: f64) -> Result<f64> {
        check_nonneg("gamma", gamma)?;
        let stats = self.client_stats()?;
        let gf = stats.mean_grad();
        Ok(grad_surrogate_value(&stats, gamma, &gf))
    }

    /// `∇F + (γ/n) Σ (∇²f_i − ∇²F)(∇f_i − ∇F)`.
    pub fn j_gamma_grad(&self, gamma: f64) -> Result<ParamVector> {
        check_nonneg("gamma", gamma)?;
        let stats = self.client_stats()?;
        let gf = stats.mean_grad();
        if gamma == 0.0 {
            return Ok(gf);
        }
        let dev: Vec<ParamVector> = stats.grads.iter().map(|gi| gi.sub(&gf)).collect();
        let own = ordered_mean_vec(&self.client_hvps(&dev)?);
        // Σ_i ∇²F (∇f_i − ∇F) = n ∇²F · mean(dev), which is zero up to rounding.
        let mean_dev = ordered_mean_vec(&dev);
        let shared = self.mean_hvp(&mean_dev)?;
        let corr: Vec<f64> = own.iter().zip(shared.iter()).map(|(a, b)| a - b).collect();
        let mut out = gf;
        out.axpy(gamma, &corr);
        Ok(out)
    }

    pub fn h_q_value(&self, q: f64, weights: &QWeights) -> Result<f64> {
        let r = weights.resolve(self.shards)?;
        h_q_from_losses(&self.client_losses()?, q, r.as_deref())
    }

    /// `Σ r_i f_i^q ∇f_i`.
    pub fn h_q_grad(&self, q: f64, weights: &QWeights) -> Result<ParamVector> {
        let r = weights.resolve(self.shards)?;
        let stats = self.client_stats()?;
        check_q_domain(&stats.losses, q)?;
        let scaled: Vec<ParamVector> = stats
            .losses
            .iter()
            .zip(&stats.grads)
            .map(|(&l, g)| g.scaled(pow_exact(l, q)))
            .collect();
        Ok(match r {
            None => ParamVector(ordered_mean_vec(&scaled)),
            Some(r) => {
                let mut out = ParamVector::zeros(self.x.len());
                for (w, s) in r.iter().zip(&scaled) {
                    out.axpy(*w, s);
                }
                out
            }
        })
    }

    pub fn surrogate_loss_l(&self, lambda: f64, a_prev: f64) -> Result<f64> {
        check_nonneg("lambda", lambda)?;
        Ok(loss_surrogate_value(&self.client_losses()?, lambda, a_prev))
    }

    pub fn surrogate_grad_l(&self, lambda: f64, a_prev: f64, g_prev: &[f64]) -> Result<ParamVector> {
        check_nonneg("lambda", lambda)?;
        check_len(g_prev, self.x.len())?;
        Ok(loss_surrogate_grad(&self.client_stats()?, lambda, a_prev, g_prev))
    }

    pub fn surrogate_loss_j(&self, gamma: f64, g_prev: &[f64]) -> Result<f64> {
        check_nonneg("gamma", gamma)?;
        check_len(g_prev, self.x.len())?;
        Ok(grad_surrogate_value(&self.client_stats()?, gamma, g_prev))
    }

    /// `∇F + (γ/n) Σ ∇²f_i (∇f_i − g_prev)`.
    pub fn surrogate_grad_j(&self, gamma: f64, g_prev: &[f64]) -> Result<ParamVector> {
        check_nonneg("gamma", gamma)?;
        check_len(g_prev, self.x.len())?;
        let stats = self.client_stats()?;
        let mut out = stats.mean_grad();
        if gamma == 0.0 {
            return Ok(out);
        }
        let dev: Vec<ParamVector> = stats.grads.iter().map(|gi| gi.sub(g_prev)).collect();
        out.axpy(gamma, &ordered_mean_vec(&self.client_hvps(&dev)?));
        Ok(out)
    }
}

fn check_nonneg(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be non-negative and finite, got {v}")))
    }
}

fn check_len(v: &[f64], d: usize) -> Result<()> {
    if v.len() == d {
        Ok(())
    } else {
        Err(Error::Dimension(format!("broadcast vector has length {}, expected {d}", v.len())))
    }
}

/// `(1/n) Σ (f_i − F)²`, the loss spread that variance regularization targets.
pub fn loss_variance(losses: &[f64]) -> f64 {
    crate::reduce::population_variance(losses)
}

/// Squared Euclidean norm.
pub fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}
