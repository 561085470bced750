//! The patch classifier, a dense-only network for exact second-order checks,
//! and the optimizers used to train them.

mod classifier;
mod mlp;
mod optim;
mod params;

pub use classifier::{Classifier, ModelConfig};
pub use mlp::Mlp;
pub use optim::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use params::{sgd_step, Param, ParamGrads, ParamRole, ParamSet};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Momentum of the batchnorm running statistics:
/// `running = MOMENTUM * running + (1 - MOMENTUM) * batch`.
pub const RUNNING_STAT_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForwardMode {
    /// Batch statistics, dropout active.
    Train,
    /// Running statistics, no dropout.
    Eval,
    /// Running statistics, dropout active (Monte-Carlo inference).
    Mc,
}

/// Inputs `[N, ...]` with one class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.shape().first() != Some(&labels.len()) {
            return Err(Error::Dimension {
                op: "batch",
                lhs: inputs.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A fresh batch estimate for a non-trainable running statistic.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningUpdate {
    pub param_index: usize,
    pub batch_value: Tensor,
}

pub struct ForwardOutput {
    pub logits: Var,
    pub running: Vec<RunningUpdate>,
}

pub struct LossOutput {
    pub loss: Var,
    pub running: Vec<RunningUpdate>,
}

/// A parametric model that the meta-learner can adapt.
///
/// `vars` are the tape handles of `params`, in order. They may be leaves
/// (plain training) or derived nodes (adapted parameters during exact
/// second-order meta-gradients).
pub trait Learner: Send + Sync {
    fn init(&self, rng: &mut dyn RngCore) -> Result<ParamSet>;

    fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        vars: &[Var],
        inputs: &Tensor,
        mode: ForwardMode,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardOutput>;

    fn loss(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        vars: &[Var],
        batch: &Batch,
        mode: ForwardMode,
        rng: &mut dyn RngCore,
    ) -> Result<LossOutput> {
        let out = self.forward(tape, params, vars, &batch.inputs, mode, rng)?;
        let loss = tape.softmax_cross_entropy(out.logits, &batch.labels)?;
        Ok(LossOutput {
            loss,
            running: out.running,
        })
    }

    /// Dropout probability applied in train and Monte-Carlo modes.
    fn dropout_rate(&self) -> f64 {
        0.0
    }

    /// Softmax probabilities of `passes` independent Monte-Carlo forwards.
    fn mc_pass_probs(
        &self,
        params: &ParamSet,
        inputs: &Tensor,
        passes: usize,
        rng: &mut dyn RngCore,
        chunk: usize,
    ) -> Result<Vec<Tensor>> {
        (0..passes)
            .map(|_| predict_probs(self, params, inputs, ForwardMode::Mc, rng, chunk))
            .collect()
    }
}

/// Loss and gradients of `learner` at `params` on `batch`.
pub fn loss_and_grads<L: Learner + ?Sized>(
    learner: &L,
    params: &ParamSet,
    batch: &Batch,
    mode: ForwardMode,
    rng: &mut dyn RngCore,
) -> Result<(f64, ParamGrads, Vec<RunningUpdate>)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let out = learner.loss(&mut tape, params, &vars, batch, mode, rng)?;
    let loss = tape.value(out.loss).item()?;
    let mut grads = tape.backward(out.loss)?;
    Ok((loss, params.collect_grads(&vars, &mut grads), out.running))
}

/// Class probabilities for `inputs`, evaluated in chunks of `chunk` rows.
pub fn predict_probs<L: Learner + ?Sized>(
    learner: &L,
    params: &ParamSet,
    inputs: &Tensor,
    mode: ForwardMode,
    rng: &mut dyn RngCore,
    chunk: usize,
) -> Result<Tensor> {
    let n = inputs.shape().first().copied().unwrap_or(0);
    let chunk = chunk.max(1);
    let mut data = Vec::new();
    let mut classes = 0;
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let part = inputs.select_rows(&idx)?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let out = learner.forward(&mut tape, params, &vars, &part, mode, rng)?;
        let probs = tape.softmax(out.logits)?;
        classes = tape.shape(probs)[1];
        data.extend_from_slice(tape.value(probs).data());
    }
    Tensor::new(vec![n, classes], data)
}

/// Blend averaged batch estimates into the running statistics of `params`.
pub fn apply_running_updates(params: &ParamSet, updates: &[Vec<RunningUpdate>]) -> Result<ParamSet> {
    let mut out = params.clone();
    let Some(first) = updates.first() else {
        return Ok(out);
    };
    for (k, u) in first.iter().enumerate() {
        let mut avg = Tensor::zeros(u.batch_value.shape());
        for set in updates {
            let other = &set
                .get(k)
                .filter(|o| o.param_index == u.param_index)
                .ok_or_else(|| Error::Consistency("mismatched running-stat updates".into()))?
                .batch_value;
            for (a, b) in avg.data_mut().iter_mut().zip(other.data()) {
                *a += b / updates.len() as f64;
            }
        }
        let old = &params.param(u.param_index).value;
        let blended = old.zip_map(&avg, |o, b| RUNNING_STAT_MOMENTUM * o + (1.0 - RUNNING_STAT_MOMENTUM) * b)?;
        out.set(u.param_index, blended)?;
    }
    Ok(out)
}

/// Replace the running statistics of `params` by batch statistics measured on `inputs`.
///
/// `inputs` is processed in chunks of `chunk` rows; per-chunk means and
/// variances are pooled with equal weight (law of total variance). Learners
/// without running statistics are returned unchanged.
pub fn recalibrate_running_stats<L: Learner + ?Sized>(
    learner: &L,
    params: &ParamSet,
    inputs: &Tensor,
    chunk: usize,
    rng: &mut dyn RngCore,
) -> Result<ParamSet> {
    let n = inputs.shape().first().copied().unwrap_or(0);
    let chunk = chunk.max(2);
    let mut per_chunk: Vec<Vec<RunningUpdate>> = Vec::new();
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        if idx.len() < 2 && !per_chunk.is_empty() {
            continue;
        }
        let part = inputs.select_rows(&idx)?;
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.value.clone())).collect();
        per_chunk.push(learner.forward(&mut tape, params, &vars, &part, ForwardMode::Train, rng)?.running);
    }
    let Some(first) = per_chunk.first() else {
        return Ok(params.clone());
    };
    let k = per_chunk.len() as f64;
    let mut out = params.clone();
    // Updates come in (mean, var) pairs per layer.
    for pair in 0..first.len() / 2 {
        let (mi, vi) = (2 * pair, 2 * pair + 1);
        let dim = first[mi].batch_value.len();
        let mut mean = vec![0.0; dim];
        for set in &per_chunk {
            for (m, b) in mean.iter_mut().zip(set[mi].batch_value.data()) {
                *m += b / k;
            }
        }
        let mut var = vec![0.0; dim];
        for set in &per_chunk {
            let (cm, cv) = (set[mi].batch_value.data(), set[vi].batch_value.data());
            for j in 0..dim {
                var[j] += (cv[j] + (cm[j] - mean[j]).powi(2)) / k;
            }
        }
        out.set(first[mi].param_index, Tensor::vector(mean))?;
        out.set(first[vi].param_index, Tensor::vector(var))?;
    }
    Ok(out)
}
