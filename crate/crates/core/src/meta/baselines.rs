use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::{evaluate_on_task, Evaluation};
use crate::error::{Error, Result};
use crate::model::{adam_step, apply_running_updates, loss_and_grads, AdamState, ForwardMode, Learner, ParamSet};
use crate::tasks::TaskDataset;

/// Plain supervised training schedule (Adam).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    pub updates: usize,
    pub lr: f64,
    /// Samples per update; smaller training sets use the whole set.
    pub minibatch: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            updates: 100,
            lr: 0.01,
            minibatch: 32,
        }
    }
}

/// `spec.updates` Adam steps on minibatches of `ids`, updating running statistics.
pub fn train_supervised<L: Learner + ?Sized>(
    learner: &L,
    params: &ParamSet,
    task: &TaskDataset,
    ids: &[usize],
    spec: &TrainSpec,
    rng: &mut dyn RngCore,
) -> Result<ParamSet> {
    train_observed(learner, params, task, ids, spec, rng, &mut |_, _| Ok(()))
}

/// [`train_supervised`] calling `observe(u, params)` after update `u` (1-based).
pub fn train_observed<L: Learner + ?Sized>(
    learner: &L,
    params: &ParamSet,
    task: &TaskDataset,
    ids: &[usize],
    spec: &TrainSpec,
    rng: &mut dyn RngCore,
    observe: &mut dyn FnMut(usize, &ParamSet) -> Result<()>,
) -> Result<ParamSet> {
    if ids.is_empty() || spec.updates == 0 {
        return Ok(params.clone());
    }
    if spec.minibatch == 0 {
        return Err(Error::Parameter("minibatch size must be at least 1".into()));
    }
    let mut adam = AdamState::new();
    let mut params = params.clone();
    let mut order: Vec<usize> = ids.to_vec();
    let mut cursor = order.len();
    let size = spec.minibatch.min(order.len());
    let full = (size == order.len()).then(|| task.batch(ids)).transpose()?;
    for update in 0..spec.updates {
        let batch = match &full {
            Some(b) => b.clone(),
            None => {
                if cursor + size > order.len() {
                    order.shuffle(rng);
                    cursor = 0;
                }
                cursor += size;
                task.batch(&order[cursor - size..cursor])?
            }
        };
        let (loss, grads, running) = loss_and_grads(learner, &params, &batch, ForwardMode::Train, rng)?;
        if !loss.is_finite() {
            return Err(Error::Training {
                iteration: update as u64,
                message: format!("non-finite training loss on task {}", task.task_id()),
            });
        }
        let (next_adam, next) = adam_step(&adam, &params, &grads, spec.lr)?;
        adam = next_adam;
        params = apply_running_updates(&next, &[running])?;
        observe(update + 1, &params)?;
    }
    Ok(params)
}

/// Result of supervised training on a real task.
#[derive(Clone, Debug)]
pub struct SupervisedOutcome {
    pub params: ParamSet,
    /// Test-pool accuracy after `0..=curve_steps` updates.
    pub curve: Vec<f64>,
    /// Test-pool evaluation after all updates.
    pub evaluation: Evaluation,
}

/// Train from scratch on `train_ids`, then evaluate on the test pool.
#[allow(clippy::too_many_arguments)]
pub fn baseline_vanilla<L: Learner + ?Sized>(
    learner: &L,
    task: &TaskDataset,
    train_ids: &[usize],
    spec: &TrainSpec,
    curve_steps: usize,
    calibration: usize,
    rng: &mut dyn RngCore,
) -> Result<SupervisedOutcome> {
    let init = learner.init(rng)?;
    fine_tune(learner, &init, task, train_ids, spec, curve_steps, calibration, rng)
}

/// Pre-train from scratch on each meta task's train pool in turn.
pub fn pretrain_transfer<L: Learner + ?Sized>(
    learner: &L,
    meta_tasks: &[TaskDataset],
    spec: &TrainSpec,
    rng: &mut dyn RngCore,
) -> Result<ParamSet> {
    let mut params = learner.init(rng)?;
    for task in meta_tasks {
        params = train_supervised(learner, &params, task, task.train_pool(), spec, rng)?;
    }
    Ok(params)
}

/// Train every layer of `params` on `train_ids`, then evaluate on the test pool.
///
/// Evaluations follow [`evaluate_on_task`] with `calibration` pool samples.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune<L: Learner + ?Sized>(
    learner: &L,
    params: &ParamSet,
    task: &TaskDataset,
    train_ids: &[usize],
    spec: &TrainSpec,
    curve_steps: usize,
    calibration: usize,
    rng: &mut dyn RngCore,
) -> Result<SupervisedOutcome> {
    let mut curve = vec![evaluate_on_task(learner, params, task, calibration)?.1.accuracy];
    let steps = curve_steps.min(spec.updates);
    let trained = train_observed(learner, params, task, train_ids, spec, rng, &mut |u, p| {
        if u <= steps {
            curve.push(evaluate_on_task(learner, p, task, calibration)?.1.accuracy);
        }
        Ok(())
    })?;
    let (params, evaluation) = evaluate_on_task(learner, &trained, task, calibration)?;
    Ok(SupervisedOutcome {
        params,
        curve,
        evaluation,
    })
}

/// Sequential pre-training on `meta_tasks` followed by fine-tuning on the real task.
#[allow(clippy::too_many_arguments)]
pub fn baseline_transfer<L: Learner + ?Sized>(
    learner: &L,
    meta_tasks: &[TaskDataset],
    task: &TaskDataset,
    train_ids: &[usize],
    pretrain: &TrainSpec,
    finetune: &TrainSpec,
    curve_steps: usize,
    calibration: usize,
    rng: &mut dyn RngCore,
) -> Result<SupervisedOutcome> {
    let pre = pretrain_transfer(learner, meta_tasks, pretrain, rng)?;
    fine_tune(learner, &pre, task, train_ids, finetune, curve_steps, calibration, rng)
}
