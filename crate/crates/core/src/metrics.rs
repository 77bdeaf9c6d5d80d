//! Per-client performance, fairness variance, round selection and sweep
//! scoring.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::federation::{AlgorithmConfig, Method};
use crate::model::ParamVector;
use crate::objectives::FederationSnapshot;
use crate::reduce::{ordered_mean, sample_variance};

/// Performance of one model on one split of every client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub per_client_acc: Vec<f64>,
    pub per_client_loss: Vec<f64>,
    pub mean_acc: f64,
    /// Sample variance (divisor `n − 1`) of `per_client_acc`.
    pub acc_variance: f64,
    pub mean_loss: f64,
}

impl RoundMetrics {
    pub fn from_clients(per_client_acc: Vec<f64>, per_client_loss: Vec<f64>) -> RoundMetrics {
        RoundMetrics {
            mean_acc: ordered_mean(&per_client_acc),
            acc_variance: sample_variance(&per_client_acc),
            mean_loss: ordered_mean(&per_client_loss),
            per_client_acc,
            per_client_loss,
        }
    }
}

/// Accuracy and loss of every client on its own `split`.
///
/// Classifiers report argmax accuracy. Quadratic models have no labels to
/// predict, so their performance measure is `exp(−f_i)`, which lies in
/// `(0, 1]` and decreases with the loss.
pub fn evaluate(snap: &FederationSnapshot<'_>, split: Split) -> Result<RoundMetrics> {
    let pairs: Vec<(f64, f64)> = snap
        .shards
        .par_iter()
        .enumerate()
        .map(|(i, shard)| {
            let batch = shard.split(split);
            if batch.is_empty() {
                return Err(Error::config(format!("client {i} has an empty {split:?} split")));
            }
            let loss = snap.spec.loss(snap.x, batch)?;
            let acc = if snap.spec.is_classifier() {
                let hits = batch
                    .iter()
                    .filter(|ex| snap.spec.predict(snap.x, &ex.features) == Some(ex.label))
                    .count();
                hits as f64 / batch.len() as f64
            } else {
                (-loss).exp()
            };
            Ok((acc, loss))
        })
        .collect::<Result<_>>()?;
    let (acc, loss) = pairs.into_iter().unzip();
    Ok(RoundMetrics::from_clients(acc, loss))
}

/// Which split picks the reported round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    #[default]
    Validation,
    /// Select on test metrics directly.
    Test,
}

/// Metrics at one iterate `x_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    /// Communication cycles completed before `x_t` was broadcast.
    pub comm: u64,
    pub mean_train_loss: f64,
    /// The method's own objective at `x_t` (`F`, `L_λ`, `J_γ` or `H_q`).
    pub objective: f64,
    pub train_losses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<RoundMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<RoundMetrics>,
}

impl RoundRecord {
    pub fn selection_metrics(&self, selection: Selection) -> Option<&RoundMetrics> {
        match selection {
            Selection::Validation => self.val.as_ref(),
            Selection::Test => self.test.as_ref(),
        }
    }
}

/// A complete run. Equality ignores wall-clock timings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: AlgorithmConfig,
    pub selection: Selection,
    pub rounds: Vec<RoundRecord>,
    pub best_round: usize,
    pub final_x: ParamVector,
    pub final_state_t: usize,
    pub final_comm: u64,
    pub timings_ms: Vec<f64>,
}

impl PartialEq for RunRecord {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.selection == other.selection
            && self.rounds == other.rounds
            && self.best_round == other.best_round
            && self.final_x == other.final_x
            && self.final_state_t == other.final_state_t
            && self.final_comm == other.final_comm
    }
}

impl RunRecord {
    pub fn new(config: AlgorithmConfig, selection: Selection) -> RunRecord {
        RunRecord {
            config,
            selection,
            rounds: Vec::new(),
            best_round: 0,
            final_x: ParamVector::default(),
            final_state_t: 0,
            final_comm: 0,
            timings_ms: Vec::new(),
        }
    }

    pub fn best(&self) -> Option<&RoundRecord> {
        self.rounds.get(self.best_round)
    }
}

/// Index maximizing mean accuracy; ties go to lower variance, then to the
/// earlier round.
pub fn select_best<'a>(metrics: impl IntoIterator<Item = &'a RoundMetrics>) -> usize {
    let mut best: Option<(usize, &RoundMetrics)> = None;
    for (i, m) in metrics.into_iter().enumerate() {
        let better = match best {
            None => true,
            Some((_, b)) => match m.mean_acc.total_cmp(&b.mean_acc) {
                Ordering::Greater => true,
                Ordering::Less => false,
                Ordering::Equal => m.acc_variance < b.acc_variance,
            },
        };
        if better {
            best = Some((i, m));
        }
    }
    best.map_or(0, |(i, _)| i)
}

/// Best round of a run under its selection rule. Runs recorded without
/// evaluation select their last round.
pub fn select_best_round(record: &RunRecord) -> usize {
    let metrics: Option<Vec<&RoundMetrics>> = record
        .rounds
        .iter()
        .map(|r| r.selection_metrics(record.selection))
        .collect();
    match metrics {
        Some(m) if !m.is_empty() => select_best(m),
        _ => record.rounds.len().saturating_sub(1),
    }
}

/// `acc − 1.96 · sqrt(var / n_seeds)`.
pub fn sweep_score(mean_acc: f64, mean_var: f64, n_seeds: usize) -> Result<f64> {
    if n_seeds == 0 {
        return Err(Error::config("sweep score needs at least one seed"));
    }
    if mean_var.is_nan() || mean_var < 0.0 {
        return Err(Error::config(format!("variance must be non-negative, got {mean_var}")));
    }
    Ok(mean_acc - 1.96 * (mean_var / n_seeds as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FairnessOrdering {
    FirstFairer,
    SecondFairer,
    Tie,
    /// Mean test losses differ by more than ε.
    NotComparable,
}

/// ε-performance-equitable comparison of the best rounds of two runs.
pub fn fairness_compare(a: &RunRecord, b: &RunRecord, eps: f64) -> FairnessOrdering {
    let pick = |r: &RunRecord| r.best().and_then(|row| row.test.clone());
    let (Some(ma), Some(mb)) = (pick(a), pick(b)) else {
        return FairnessOrdering::NotComparable;
    };
    let floor = ma.mean_loss.min(mb.mean_loss);
    if ma.mean_loss > floor + eps || mb.mean_loss > floor + eps {
        return FairnessOrdering::NotComparable;
    }
    match ma.acc_variance.total_cmp(&mb.acc_variance) {
        Ordering::Less => FairnessOrdering::FirstFairer,
        Ordering::Greater => FairnessOrdering::SecondFairer,
        Ordering::Equal => FairnessOrdering::Tie,
    }
}

/// One run reduced to the numbers a results table needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub param: f64,
    pub lr: f64,
    pub rounds: usize,
    #[serde(default)]
    pub alpha: Option<f64>,
    pub seed: u64,
    pub best_round: usize,
    pub comm: u64,
    pub val_mean_acc: f64,
    pub val_acc_var: f64,
    pub test_mean_acc: f64,
    pub test_acc_var: f64,
    pub test_mean_loss: f64,
}

impl RunSummary {
    pub fn from_record(record: &RunRecord, alpha: Option<f64>) -> Result<RunSummary> {
        let row = record
            .best()
            .ok_or_else(|| Error::config("run record has no rounds"))?;
        let (val, test) = match (&row.val, &row.test) {
            (Some(v), Some(t)) => (v, t),
            _ => return Err(Error::config("run record was not evaluated")),
        };
        Ok(RunSummary {
            method: record.config.method,
            param: record.config.param(),
            lr: record.config.lr,
            rounds: record.config.rounds,
            alpha,
            seed: record.config.seed,
            best_round: record.best_round,
            comm: row.comm,
            val_mean_acc: val.mean_acc,
            val_acc_var: val.acc_variance,
            test_mean_acc: test.mean_acc,
            test_acc_var: test.acc_variance,
            test_mean_loss: test.mean_loss,
        })
    }

    /// Test accuracy in percent.
    pub fn test_acc_pct(&self) -> f64 {
        100.0 * self.test_mean_acc
    }

    /// Test accuracy variance in percent².
    pub fn test_var_pct2(&self) -> f64 {
        1e4 * self.test_acc_var
    }
}

/// Mean and standard error (`sd / sqrt(k)`, `0` for one value).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let mean = ordered_mean(values);
    let se = if values.len() < 2 {
        0.0
    } else {
        (sample_variance(values) / values.len() as f64).sqrt()
    };
    (mean, se)
}

fn method_rank(m: Method) -> usize {
    Method::ALL.iter().position(|&x| x == m).expect("listed")
}

/// Table with one row per method and, for each α, a test-accuracy column and
/// a test-variance column, each holding `mean (±stderr)` over seeds.
/// Accuracy is in percent and variance in percent², i.e. the sample
/// variance of per-client accuracies expressed in percent.
pub fn table1_csv(summaries: &[RunSummary], header_comment: &str) -> String {
    let mut alphas: Vec<f64> = summaries.iter().filter_map(|s| s.alpha).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let alpha_key = |a: Option<f64>| a.map(f64::to_bits);
    let mut cells: BTreeMap<(usize, Option<u64>), Vec<&RunSummary>> = BTreeMap::new();
    for s in summaries {
        cells.entry((method_rank(s.method), alpha_key(s.alpha))).or_default().push(s);
    }
    let mut methods: Vec<Method> = summaries.iter().map(|s| s.method).collect();
    methods.sort_by_key(|&m| method_rank(m));
    methods.dedup();
    let columns: Vec<Option<f64>> = if alphas.is_empty() {
        vec![None]
    } else {
        alphas.iter().copied().map(Some).collect()
    };

    let mut out = String::new();
    if !header_comment.is_empty() {
        for line in header_comment.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
    }
    out.push_str("method");
    for a in &columns {
        let tag = a.map_or_else(|| "all".to_string(), |a| format!("dir{a}"));
        out.push_str(&format!(",test_acc_pct_{tag},test_var_pct2_{tag}"));
    }
    out.push('\n');
    for m in methods {
        out.push_str(m.label());
        for a in &columns {
            match cells.get(&(method_rank(m), alpha_key(*a))) {
                None => out.push_str(",,"),
                Some(runs) => {
                    let mut runs = runs.clone();
                    runs.sort_by_key(|s| s.seed);
                    let acc: Vec<f64> = runs.iter().map(|s| s.test_acc_pct()).collect();
                    let var: Vec<f64> = runs.iter().map(|s| s.test_var_pct2()).collect();
                    let (am, ase) = mean_stderr(&acc);
                    let (vm, vse) = mean_stderr(&var);
                    out.push_str(&format!(",{am:.2} (±{ase:.2}),{vm:.2} (±{vse:.2})"));
                }
            }
        }
        out.push('\n');
    }
    out
}
