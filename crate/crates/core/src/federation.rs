//! Round engines for the six methods, the training loop and checkpoints.
//!
//! Every method has the same shape: clients report `f_i(x_t)`, `∇f_i(x_t)`
//! and a step direction `d_i`, and the server moves to
//! `x_{t+1} = x_t − η · mean(d_i)`. Averaging the directions instead of the
//! locally stepped models keeps the FedAvg reduction exact in floating
//! point. q-FFL additionally divides by the mean of its `h_i` terms.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, select_best_round, RoundRecord, RunRecord, Selection};
use crate::model::{ModelSpec, ParamVector};
use crate::objectives::{
    check_q_domain, grad_surrogate_value, h_q_from_losses, loss_surrogate_value, pow_exact, BatchPolicy, ClientStats,
    FederationSnapshot, QWeights,
};
use crate::reduce::ordered_mean_vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "fairloss")]
    FairLoss,
    #[serde(rename = "fairloss_exact")]
    FairLossExact,
    #[serde(rename = "fairgrad")]
    FairGrad,
    #[serde(rename = "fairgrad_exact")]
    FairGradExact,
    #[serde(rename = "qffl")]
    QFfl,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::FedAvg,
        Method::FairLoss,
        Method::FairLossExact,
        Method::FairGrad,
        Method::FairGradExact,
        Method::QFfl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FedAvg => "fedavg",
            Method::FairLoss => "fairloss",
            Method::FairLossExact => "fairloss_exact",
            Method::FairGrad => "fairgrad",
            Method::FairGradExact => "fairgrad_exact",
            Method::QFfl => "qffl",
        }
    }

    /// Display label used in result tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::FedAvg => "FedAvg",
            Method::FairLoss => "FairLoss",
            Method::FairLossExact => "FairLoss*",
            Method::FairGrad => "FairGrad",
            Method::FairGradExact => "FairGrad*",
            Method::QFfl => "q-FFL",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown method `{s}`")))
    }

    fn code(self) -> u32 {
        Method::ALL.iter().position(|&m| m == self).expect("listed") as u32
    }

    fn from_code(code: u32) -> Option<Method> {
        Method::ALL.get(code as usize).copied()
    }

    pub fn is_exact(self) -> bool {
        matches!(self, Method::FairLossExact | Method::FairGradExact)
    }

    /// Broadcast-and-gather cycles per round.
    pub fn comm_per_round(self) -> u64 {
        if self.is_exact() {
            2
        } else {
            1
        }
    }

    /// Name of the fairness parameter, if any.
    pub fn parameter(self) -> Option<&'static str> {
        match self {
            Method::FedAvg => None,
            Method::FairLoss | Method::FairLossExact => Some("lambda"),
            Method::FairGrad | Method::FairGradExact => Some("gamma"),
            Method::QFfl => Some("q"),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Gradient used by a q-FFL client for its pre-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QfflLocalStep {
    /// The client's own term of `∇H_q`: `f_i^q ∇f_i`.
    #[default]
    LocalTerm,
    /// The full `∇H_q(x_t)`, identical for every client.
    Global,
    /// Plain `∇f_i`, as in the original q-FedAvg.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmConfig {
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    /// Learning rate η.
    pub lr: f64,
    /// Communication rounds T.
    pub rounds: usize,
    /// Per-client mini-batch size; full batch when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub qffl_weights: QWeights,
    #[serde(default)]
    pub qffl_local_step: QfflLocalStep,
}

impl AlgorithmConfig {
    pub fn new(method: Method, param: f64, lr: f64, rounds: usize) -> AlgorithmConfig {
        AlgorithmConfig {
            method,
            lambda: None,
            gamma: None,
            q: None,
            lr,
            rounds,
            batch_size: None,
            seed: 0,
            qffl_weights: QWeights::Uniform,
            qffl_local_step: QfflLocalStep::LocalTerm,
        }
        .with_param(param)
    }

    pub fn fedavg(lr: f64, rounds: usize) -> AlgorithmConfig {
        AlgorithmConfig::new(Method::FedAvg, 0.0, lr, rounds)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Sets the method's fairness parameter; ignored for FedAvg.
    pub fn with_param(mut self, value: f64) -> Self {
        self.lambda = None;
        self.gamma = None;
        self.q = None;
        match self.method.parameter() {
            Some("lambda") => self.lambda = Some(value),
            Some("gamma") => self.gamma = Some(value),
            Some(_) => self.q = Some(value),
            None => {}
        }
        self
    }

    /// The method's fairness parameter, `0` for FedAvg.
    pub fn param(&self) -> f64 {
        self.lambda.or(self.gamma).or(self.q).unwrap_or(0.0)
    }

    pub fn batch_policy(&self) -> BatchPolicy {
        match self.batch_size {
            None => BatchPolicy::Full,
            Some(size) => BatchPolicy::MiniBatch { size, seed: self.seed },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let set: Vec<&str> = [("lambda", self.lambda), ("gamma", self.gamma), ("q", self.q)]
            .iter()
            .filter(|(_, v)| v.is_some())
            .map(|(n, _)| *n)
            .collect();
        match self.method.parameter() {
            None if !set.is_empty() => {
                return Err(Error::config(format!("fedavg takes no fairness parameter, got {}", set.join(", "))))
            }
            Some(p) if set != [p] => {
                return Err(Error::config(format!("{} requires exactly `{p}`, got [{}]", self.method, set.join(", "))))
            }
            _ => {}
        }
        let p = self.param();
        if !(p >= 0.0 && p.is_finite()) {
            return Err(Error::config(format!("fairness parameter must be non-negative and finite, got {p}")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds must be at least 1"));
        }
        self.batch_policy().validate()
    }
}

/// Model family plus client data.
#[derive(Debug, Clone, PartialEq)]
pub struct Federation {
    pub spec: ModelSpec,
    pub shards: Vec<ClientShard>,
}

impl Federation {
    pub fn new(spec: ModelSpec, shards: Vec<ClientShard>) -> Result<Federation> {
        spec.validate()?;
        if shards.is_empty() {
            return Err(Error::config("federation needs at least one client"));
        }
        for (i, s) in shards.iter().enumerate() {
            for split in [Split::Train, Split::Val, Split::Test] {
                if s.split(split).is_empty() {
                    return Err(Error::config(format!("client {i} has an empty {split:?} split")));
                }
            }
        }
        Ok(Federation { spec, shards })
    }

    pub fn n(&self) -> usize {
        self.shards.len()
    }

    pub fn snapshot<'a>(&'a self, x: &'a ParamVector) -> FederationSnapshot<'a> {
        FederationSnapshot::new(&self.shards, &self.spec, x)
    }
}

/// Server-side state carried between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub method: Method,
    pub seed: u64,
    /// Index of the next round.
    pub t: usize,
    pub x: ParamVector,
    /// Average loss broadcast with `x` (stale for approximate variants).
    pub a: f64,
    /// Average gradient broadcast with `x`.
    pub g: ParamVector,
    /// Communication cycles so far.
    pub comm: u64,
}

impl TrainState {
    pub fn initial(cfg: &AlgorithmConfig, x0: ParamVector) -> TrainState {
        let d = x0.len();
        TrainState {
            method: cfg.method,
            seed: cfg.seed,
            t: 0,
            x: x0,
            a: 0.0,
            g: ParamVector::zeros(d),
            comm: 0,
        }
    }
}

/// Everything computed by one round before the server step.
#[derive(Debug, Clone)]
pub struct RoundPlan {
    pub stats: ClientStats,
    /// Per-client directions; `Δ_i` for q-FFL.
    pub directions: Vec<ParamVector>,
    /// q-FFL mean of the normalized `h_i`; `None` for all other methods.
    pub denominator: Option<f64>,
    /// Objective of the method at `x_t`.
    pub objective: f64,
    /// Averages broadcast next round.
    pub next_a: f64,
    pub next_g: ParamVector,
}

impl RoundPlan {
    pub fn mean_direction(&self) -> ParamVector {
        ParamVector(ordered_mean_vec(&self.directions))
    }
}

fn check_stats(stats: &ClientStats, round: usize) -> Result<()> {
    for (i, (l, g)) in stats.losses.iter().zip(&stats.grads).enumerate() {
        if !l.is_finite() || !g.is_finite() {
            return Err(Error::NonFinite {
                context: format!("client {i} report"),
                round: Some(round),
            });
        }
    }
    Ok(())
}

/// Objective value of `cfg.method` from client statistics at one point.
pub fn objective_from_stats(cfg: &AlgorithmConfig, shards: &[ClientShard], stats: &ClientStats) -> Result<f64> {
    let p = cfg.param();
    match cfg.method {
        Method::FedAvg => Ok(stats.mean_loss()),
        Method::FairLoss | Method::FairLossExact => Ok(loss_surrogate_value(&stats.losses, p, stats.mean_loss())),
        Method::FairGrad | Method::FairGradExact => Ok(grad_surrogate_value(stats, p, &stats.mean_grad())),
        Method::QFfl => {
            let r = cfg.qffl_weights.resolve(shards)?;
            h_q_from_losses(&stats.losses, p, r.as_deref())
        }
    }
}

/// Client reports and directions for round `state.t`.
pub fn plan_round(state: &TrainState, fed: &Federation, cfg: &AlgorithmConfig) -> Result<RoundPlan> {
    if state.method != cfg.method {
        return Err(Error::config(format!("state is for {}, config for {}", state.method, cfg.method)));
    }
    let snap = fed.snapshot(&state.x).with_batch(cfg.batch_policy(), state.t);
    let stats = snap.client_stats().map_err(|e| e.at_round(state.t))?;
    check_stats(&stats, state.t)?;
    let objective = objective_from_stats(cfg, &fed.shards, &stats)?;
    let f = stats.mean_loss();
    let gf = stats.mean_grad();
    let p = cfg.param();

    let mut denominator = None;
    let directions = match cfg.method {
        _ if p == 0.0 => stats.grads.clone(),
        Method::FedAvg => stats.grads.clone(),
        Method::FairLoss | Method::FairLossExact => {
            let (a, g) = if cfg.method.is_exact() {
                (f, &gf)
            } else {
                (state.a, &state.g)
            };
            stats
                .losses
                .iter()
                .zip(&stats.grads)
                .map(|(&l, gi)| {
                    let mut d = gi.clone();
                    d.axpy(p * (l - a), &gi.sub(g));
                    d
                })
                .collect()
        }
        Method::FairGrad | Method::FairGradExact => {
            let g = if cfg.method.is_exact() { &gf } else { &state.g };
            let dev: Vec<ParamVector> = stats.grads.iter().map(|gi| gi.sub(g)).collect();
            let hv = snap.client_hvps(&dev).map_err(|e| e.at_round(state.t))?;
            stats
                .grads
                .iter()
                .zip(&hv)
                .map(|(gi, h)| {
                    let mut d = gi.clone();
                    d.axpy(p, h);
                    d
                })
                .collect()
        }
        Method::QFfl => {
            let (dirs, denom) = qffl_directions(&stats, fed, cfg, state.t)?;
            denominator = Some(denom);
            dirs
        }
    };

    let (next_a, next_g) = match cfg.method {
        Method::FedAvg => (state.a, state.g.clone()),
        _ => (f, gf),
    };
    Ok(RoundPlan {
        stats,
        directions,
        denominator,
        objective,
        next_a,
        next_g,
    })
}

fn qffl_directions(stats: &ClientStats, fed: &Federation, cfg: &AlgorithmConfig, round: usize) -> Result<(Vec<ParamVector>, f64)> {
    let q = cfg.param();
    let eta = cfg.lr;
    check_q_domain(&stats.losses, q)?;
    let global = match cfg.qffl_local_step {
        QfflLocalStep::Global => {
            let r = cfg.qffl_weights.resolve(&fed.shards)?;
            let scaled: Vec<ParamVector> = stats
                .losses
                .iter()
                .zip(&stats.grads)
                .map(|(&l, g)| g.scaled(pow_exact(l, q)))
                .collect();
            Some(match r {
                None => ParamVector(ordered_mean_vec(&scaled)),
                Some(r) => {
                    let mut out = ParamVector::zeros(stats.grads[0].len());
                    for (w, s) in r.iter().zip(&scaled) {
                        out.axpy(*w, s);
                    }
                    out
                }
            })
        }
        _ => None,
    };
    let mut deltas = Vec::with_capacity(stats.n());
    let mut h = Vec::with_capacity(stats.n());
    for (i, (&l, g)) in stats.losses.iter().zip(&stats.grads).enumerate() {
        let fq = pow_exact(l, q);
        // Δx_i = L(x_t − x̄_i) with L = 1/η is the local direction itself.
        let dir = match (cfg.qffl_local_step, &global) {
            (QfflLocalStep::LocalTerm, _) => g.scaled(fq),
            (QfflLocalStep::Plain, _) => g.clone(),
            (QfflLocalStep::Global, Some(gh)) => gh.clone(),
            (QfflLocalStep::Global, None) => unreachable!("computed above"),
        };
        let norm_sq = dir.dot(&dir);
        let curvature = if norm_sq == 0.0 {
            0.0
        } else {
            let fq1 = pow_exact(l, q - 1.0);
            if !fq1.is_finite() {
                return Err(Error::Domain(format!(
                    "client {i} has loss {l} and q = {q}; f^(q-1) is undefined for a nonzero step (round {round})"
                )));
            }
            q * eta * fq1 * norm_sq
        };
        // h_i scaled by η so that q = 0 gives exactly 1.
        h.push(curvature + fq);
        deltas.push(dir.scaled(fq));
    }
    let denom = crate::reduce::ordered_mean(&h);
    if !denom.is_finite() {
        return Err(Error::NonFinite {
            context: "q-FFL denominator".into(),
            round: Some(round),
        });
    }
    Ok((deltas, denom))
}

/// Applies a plan: the server step and state carry-over.
pub fn apply_plan(state: &TrainState, plan: RoundPlan, cfg: &AlgorithmConfig) -> Result<TrainState> {
    let mean = plan.mean_direction();
    let mut x = state.x.clone();
    match plan.denominator {
        Some(0.0) => {}
        Some(d) => {
            for (xk, mk) in x.iter_mut().zip(mean.iter()) {
                *xk -= cfg.lr * (mk / d);
            }
        }
        None => x.axpy(-cfg.lr, &mean),
    }
    if !x.is_finite() {
        return Err(Error::NonFinite {
            context: format!("{} server update", cfg.method),
            round: Some(state.t),
        });
    }
    Ok(TrainState {
        method: state.method,
        seed: state.seed,
        t: state.t + 1,
        x,
        a: plan.next_a,
        g: plan.next_g,
        comm: state.comm + cfg.method.comm_per_round(),
    })
}

/// One round of any method.
pub fn round(state: &TrainState, fed: &Federation, cfg: &AlgorithmConfig) -> Result<TrainState> {
    let plan = plan_round(state, fed, cfg)?;
    apply_plan(state, plan, cfg)
}

fn round_for(expected: Method, state: &TrainState, fed: &Federation, cfg: &AlgorithmConfig) -> Result<TrainState> {
    if cfg.method != expected {
        return Err(Error::config(format!("expected method {expected}, config has {}", cfg.method)));
    }
    round(state, fed, cfg)
}

pub fn round_fedavg(state: &TrainState, fed: &Federation, cfg: &AlgorithmConfig) -> Result<TrainState> {
    round_for(Method::FedAvg, state, fed, cfg)
}

pub fn round_fairloss(state: &TrainState, fed: &Federation, cfg: &AlgorithmConfig) -> Result<TrainState> {
    round_for(Method::FairLoss, state, fed, cfg)
}

pub fn round_fairloss_exact(state: &TrainState, fed: &Federation, cfg: &AlgorithmConfig) -> Result<TrainState> {
    round_for(Method::FairLossExact, state, fed, cfg)
}

pub fn round_fairgrad(state: &TrainState, fed: &Federation, cfg: &AlgorithmConfig) -> Result<TrainState> {
    round_for(Method::FairGrad, state, fed, cfg)
}

pub fn round_fairgrad_exact(state: &TrainState, fed: &Federation, cfg: &AlgorithmConfig) -> Result<TrainState> {
    round_for(Method::FairGradExact, state, fed, cfg)
}

pub fn round_qffl(state: &TrainState, fed: &Federation, cfg: &AlgorithmConfig) -> Result<TrainState> {
    round_for(Method::QFfl, state, fed, cfg)
}

// ---------------------------------------------------------------------------
// Checkpoints

const CKPT_MAGIC: &[u8; 8] = b"FFLCKPT\0";
const CKPT_VERSION: u32 = 1;

/// Little-endian layout: magic, version u32, method u32, t u64, comm u64,
/// seed u64, d u64, a f64, x[d] f64, g[d] f64.
pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let d = state.x.len();
    let mut out = Vec::with_capacity(56 + 16 * d);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&state.method.code().to_le_bytes());
    for v in [state.t as u64, state.comm, state.seed, d as u64] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&state.a.to_le_bytes());
    for v in state.x.iter().chain(state.g.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| bad(format!("truncated at byte {pos}, wanted {n} more")))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != CKPT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes"));
    let version = u32_at(take(4)?);
    if version != CKPT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let code = u32_at(take(4)?);
    let method = Method::from_code(code).ok_or_else(|| bad(format!("unknown method code {code}")))?;
    let t = u64_at(take(8)?) as usize;
    let comm = u64_at(take(8)?);
    let seed = u64_at(take(8)?);
    let d = u64_at(take(8)?) as usize;
    let a = f64::from_bits(u64_at(take(8)?));
    let mut read_vec = |n: usize| -> Result<ParamVector> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(f64::from_bits(u64_at(take(8)?)));
        }
        Ok(ParamVector(v))
    };
    let x = read_vec(d)?;
    let g = read_vec(d)?;
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(TrainState {
        method,
        seed,
        t,
        x,
        a,
        g,
        comm,
    })
}

pub fn write_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(state))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Starting point; `spec.init_params(cfg.seed)` when absent.
    pub init: Option<ParamVector>,
    /// Continue from this state instead of round 0.
    pub resume: Option<TrainState>,
    /// Write a checkpoint every this many rounds (and on failure).
    pub checkpoint_every: Option<usize>,
    pub checkpoint_path: Option<PathBuf>,
    /// JSON-lines per-round log.
    pub event_log: Option<PathBuf>,
    /// Worker threads for per-client work; the global pool when absent.
    pub workers: Option<usize>,
    pub selection: Selection,
    /// Skip validation/test evaluation (theory and reduction checks).
    pub skip_eval: bool,
    /// Stop after this round index even if `cfg.rounds` is larger.
    pub stop_after: Option<usize>,
}

/// A run that stopped early; `partial` holds every completed round.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub partial: Box<RunRecord>,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} recorded rounds)", self.error, self.partial.rounds.len())
    }
}

impl std::error::Error for TrainFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Error {
        f.error
    }
}

#[derive(Serialize)]
struct Event<'a> {
    t: usize,
    method: &'a str,
    #[serde(rename = "F")]
    f: f64,
    objective: f64,
    client_losses: &'a [f64],
    comm_rounds: u64,
}

/// Runs `cfg.rounds` rounds and records metrics at every iterate
/// `x_0, …, x_T`.
pub fn train(cfg: &AlgorithmConfig, fed: &Federation, opts: &TrainOptions) -> std::result::Result<RunRecord, TrainFailure> {
    let empty = || RunRecord::new(cfg.clone(), opts.selection);
    if let Err(error) = cfg.validate() {
        return Err(TrainFailure {
            error,
            partial: Box::new(empty()),
        });
    }
    match opts.workers {
        Some(w) => match rayon::ThreadPoolBuilder::new().num_threads(w).build() {
            Ok(pool) => pool.install(|| train_inner(cfg, fed, opts)),
            Err(e) => Err(TrainFailure {
                error: Error::config(format!("cannot build worker pool: {e}")),
                partial: Box::new(empty()),
            }),
        },
        None => train_inner(cfg, fed, opts),
    }
}

fn train_inner(cfg: &AlgorithmConfig, fed: &Federation, opts: &TrainOptions) -> std::result::Result<RunRecord, TrainFailure> {
    let mut record = RunRecord::new(cfg.clone(), opts.selection);
    let mut log = None;
    let mut state = match &opts.resume {
        Some(s) => s.clone(),
        None => TrainState::initial(cfg, opts.init.clone().unwrap_or_else(|| fed.spec.init_params(cfg.seed))),
    };
    let last = opts.stop_after.map_or(cfg.rounds, |s| s.min(cfg.rounds));

    let result = (|| -> Result<()> {
        if let Some(path) = &opts.event_log {
            log = Some(BufWriter::new(File::create(path)?));
        }
        if state.x.len() != fed.spec.param_count() {
            return Err(Error::Dimension(format!(
                "state has {} parameters, model needs {}",
                state.x.len(),
                fed.spec.param_count()
            )));
        }
        if state.method != cfg.method {
            return Err(Error::Checkpoint(format!("checkpoint is for {}, config for {}", state.method, cfg.method)));
        }
        loop {
            let started = Instant::now();
            let t = state.t;
            let plan = if t < last { Some(plan_round(&state, fed, cfg)?) } else { None };
            let stats = match &plan {
                Some(p) => p.stats.clone(),
                None => {
                    let snap = fed.snapshot(&state.x).with_batch(cfg.batch_policy(), t);
                    snap.client_stats().map_err(|e| e.at_round(t))?
                }
            };
            let objective = match &plan {
                Some(p) => p.objective,
                None => objective_from_stats(cfg, &fed.shards, &stats)?,
            };
            let (val, test) = if opts.skip_eval {
                (None, None)
            } else {
                let snap = fed.snapshot(&state.x);
                (Some(evaluate(&snap, Split::Val)?), Some(evaluate(&snap, Split::Test)?))
            };
            let row = RoundRecord {
                t,
                comm: state.comm,
                mean_train_loss: stats.mean_loss(),
                objective,
                train_losses: stats.losses,
                val,
                test,
            };
            if let Some(w) = log.as_mut() {
                let event = Event {
                    t,
                    method: cfg.method.name(),
                    f: row.mean_train_loss,
                    objective: row.objective,
                    client_losses: &row.train_losses,
                    comm_rounds: row.comm,
                };
                serde_json::to_writer(&mut *w, &event)?;
                w.write_all(b"\n")?;
            }
            record.rounds.push(row);
            if let Some(plan) = plan {
                state = apply_plan(&state, plan, cfg)?;
                if let (Some(k), Some(path)) = (opts.checkpoint_every, &opts.checkpoint_path) {
                    if k > 0 && state.t % k == 0 {
                        write_checkpoint(path, &state)?;
                    }
                }
            }
            record.timings_ms.push(started.elapsed().as_secs_f64() * 1e3);
            if t >= last {
                break;
            }
        }
        if let Some(w) = log.as_mut() {
            w.flush()?;
        }
        Ok(())
    })();

    record.final_x = state.x.clone();
    record.final_state_t = state.t;
    record.final_comm = state.comm;
    record.best_round = select_best_round(&record);
    match result {
        Ok(()) => Ok(record),
        Err(error) => {
            if let Some(w) = log.as_mut() {
                let _ = w.flush();
            }
            if let Some(path) = &opts.checkpoint_path {
                let _ = write_checkpoint(path, &state);
            }
            Err(TrainFailure {
                error,
                partial: Box::new(record),
            })
        }
    }
}

/// Trajectory `x_0, …, x_T` without evaluation, for reduction checks.
pub fn trajectory(cfg: &AlgorithmConfig, fed: &Federation, x0: ParamVector) -> Result<Vec<ParamVector>> {
    let mut state = TrainState::initial(cfg, x0);
    let mut out = vec![state.x.clone()];
    for _ in 0..cfg.rounds {
        state = round(&state, fed, cfg)?;
        out.push(state.x.clone());
    }
    Ok(out)
}
