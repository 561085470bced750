//! Monte-Carlo dropout uncertainty, query selection and the label→adapt loop.

mod session;

pub use session::{
    active_loop, ActiveOutcome, ActiveSession, LoopResult, OracleLabeler, PendingQuery, RoundLog, SessionStatus,
    SubmitAck, Labeler,
};

use std::cmp::Ordering;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::EVAL_CHUNK;
use crate::model::{Learner, ParamSet};
use crate::tasks::TaskDataset;

/// Which unlabeled samples are queried each round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Highest MC-dropout predictive entropy first.
    Entropy,
    /// Uniformly at random; the reference the entropy strategy is compared to.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActiveConfig {
    /// T, stochastic forward passes per score.
    pub mc_passes: usize,
    /// Must match the dropout rate of the learner the loop runs with.
    pub dropout_rate: f64,
    /// Samples queried per round.
    pub query_batch: usize,
    /// Total labels, including one seed sample per class.
    pub budget: usize,
    /// Upper bound on query rounds after seeding; 0 runs until the budget is spent.
    pub rounds: usize,
    pub inner_lr: f64,
    pub inner_steps: usize,
    /// Unlabeled samples scored per round, drawn at random; 0 scores the whole pool.
    pub candidates: usize,
    /// Adapt from the previous round's φ instead of restarting from θ.
    pub continue_from_phi: bool,
    pub strategy: Strategy,
    /// Pool samples used to re-estimate batchnorm statistics; 0 keeps θ's statistics.
    pub calibration: usize,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        ActiveConfig {
            mc_passes: 20,
            dropout_rate: 0.1,
            query_batch: 2,
            budget: 16,
            rounds: 0,
            inner_lr: 0.01,
            inner_steps: 1,
            candidates: 128,
            continue_from_phi: false,
            strategy: Strategy::Entropy,
            calibration: crate::meta::CALIBRATION_SAMPLES,
        }
    }
}

impl ActiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_passes < 2 {
            return Err(Error::Parameter(format!("need at least 2 MC passes, got {}", self.mc_passes)));
        }
        if self.query_batch == 0 {
            return Err(Error::Parameter("query batch must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Parameter(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.inner_lr > 0.0) || self.inner_steps == 0 {
            return Err(Error::Parameter("adaptation needs a positive rate and at least one step".into()));
        }
        Ok(())
    }
}

/// Who provided a label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Oracle,
    Human,
}

impl LabelSource {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelSource::Oracle => "oracle",
            LabelSource::Human => "human",
        }
    }
}

/// One answered query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub round: usize,
    pub sample_id: usize,
    /// Absent for seed and randomly drawn samples.
    pub entropy: Option<f64>,
    pub label_source: LabelSource,
    pub label: usize,
}

/// Labeled and unlabeled parts of a task's train pool.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolState {
    pub labeled: Vec<(usize, usize)>,
    pub unlabeled: Vec<usize>,
    pub budget_remaining: usize,
    pub history: Vec<QueryRecord>,
}

impl PoolState {
    pub fn labeled_ids(&self) -> Vec<usize> {
        self.labeled.iter().map(|&(id, _)| id).collect()
    }

    /// Query log as CSV: `round,sample_id,entropy,label_source,label`.
    pub fn write_query_log(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["round", "sample_id", "entropy", "label_source", "label"])?;
        for r in &self.history {
            w.write_record([
                r.round.to_string(),
                r.sample_id.to_string(),
                r.entropy.map(|e| e.to_string()).unwrap_or_default(),
                r.label_source.as_str().to_string(),
                r.label.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// MC-dropout uncertainty of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub sample_id: usize,
    pub mc_mean_probs: Vec<f64>,
    /// Nats.
    pub entropy: f64,
    pub passes: usize,
}

/// Mean of per-pass probability vectors.
///
/// Uses a running mean so that identical passes average to exactly that pass.
pub fn mc_average(passes: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = passes.first().ok_or_else(|| Error::Usage("MC average of zero passes".into()))?;
    let mut mean = vec![0.0; first.len()];
    for (k, pass) in passes.iter().enumerate() {
        if pass.len() != mean.len() {
            return Err(Error::Dimension {
                op: "mc_average",
                lhs: vec![mean.len()],
                rhs: vec![pass.len()],
            });
        }
        for (m, p) in mean.iter_mut().zip(pass) {
            *m += (p - *m) / (k + 1) as f64;
        }
    }
    Ok(mean)
}

/// Natural-log entropy of a probability vector, with `0·log 0 = 0`.
pub fn predictive_entropy(probs: &[f64]) -> Result<f64> {
    let mut h = 0.0;
    for &p in probs {
        if !(p >= 0.0) {
            return Err(Error::Data(format!("invalid probability {p}")));
        }
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h)
}

/// Mean class probabilities over `passes` MC-dropout forwards, one row per sample of `ids`.
pub fn mc_predict<L: Learner + ?Sized>(
    learner: &L,
    phi: &ParamSet,
    task: &TaskDataset,
    ids: &[usize],
    passes: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<Vec<f64>>> {
    if passes == 0 {
        return Err(Error::Parameter("MC prediction needs at least one pass".into()));
    }
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    let inputs = task.inputs(ids)?;
    let per_pass = learner.mc_pass_probs(phi, &inputs, passes, rng, EVAL_CHUNK)?;
    let classes = per_pass[0].shape()[1];
    (0..ids.len())
        .map(|row| {
            let rows: Vec<Vec<f64>> = per_pass
                .iter()
                .map(|t| t.data()[row * classes..(row + 1) * classes].to_vec())
                .collect();
            mc_average(&rows)
        })
        .collect()
}

/// Entropy scores of `ids` under `phi`.
pub fn score_samples<L: Learner + ?Sized>(
    learner: &L,
    phi: &ParamSet,
    task: &TaskDataset,
    ids: &[usize],
    passes: usize,
    rng: &mut dyn RngCore,
) -> Result<Vec<UncertaintyScore>> {
    let means = mc_predict(learner, phi, task, ids, passes, rng)?;
    ids.iter()
        .zip(means)
        .map(|(&sample_id, mc_mean_probs)| {
            Ok(UncertaintyScore {
                sample_id,
                entropy: predictive_entropy(&mc_mean_probs)?,
                mc_mean_probs,
                passes,
            })
        })
        .collect()
}

/// Orders by descending entropy, then ascending sample id.
fn by_uncertainty(a: &UncertaintyScore, b: &UncertaintyScore) -> Ordering {
    b.entropy
        .total_cmp(&a.entropy)
        .then(a.sample_id.cmp(&b.sample_id))
}

/// Take up to `batch` of the most uncertain unlabeled samples out of the pool.
///
/// Scores for ids that are not unlabeled are ignored. The budget is charged
/// at selection time. An empty result means the loop should stop.
pub fn select_queries(pool: &mut PoolState, scores: &[UncertaintyScore], batch: usize) -> Vec<UncertaintyScore> {
    let mut seen = std::collections::HashSet::new();
    let mut eligible: Vec<&UncertaintyScore> = scores
        .iter()
        .filter(|s| pool.unlabeled.contains(&s.sample_id) && seen.insert(s.sample_id))
        .collect();
    eligible.sort_by(|a, b| by_uncertainty(a, b));
    let take = batch.min(pool.budget_remaining).min(eligible.len());
    let chosen: Vec<UncertaintyScore> = eligible[..take].iter().map(|s| (*s).clone()).collect();
    pool.unlabeled.retain(|id| !chosen.iter().any(|s| s.sample_id == *id));
    pool.budget_remaining -= take;
    chosen
}

#[cfg(test)]
mod tests;
