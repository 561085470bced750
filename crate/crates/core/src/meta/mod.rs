//! MAML meta-training over an augmented task stream, fast adaptation with
//! evaluation curves, and the supervised baselines.

mod baselines;
mod state;

pub use baselines::{
    baseline_transfer, baseline_vanilla, fine_tune, pretrain_transfer, train_observed, train_supervised, SupervisedOutcome,
    TrainSpec,
};
pub use state::{MetaRngs, MetaState, RngSnapshot};

use std::fs::OpenOptions;
use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    adam_step, apply_running_updates, loss_and_grads, predict_probs, recalibrate_running_stats, sgd_step, Batch, ForwardMode, Learner,
    ParamGrads, ParamSet, RunningUpdate,
};
use crate::tasks::{augment_task, sample_episode, AugmentationConfig, Episode, EpisodeSpec, Split, TaskDataset};
use crate::tensor::Tape;

/// Rows per chunk when predicting on a test pool.
pub const EVAL_CHUNK: usize = 64;

/// Unlabeled train-pool samples used to re-estimate batchnorm statistics of an adapted model.
pub const CALIBRATION_SAMPLES: usize = 256;

/// Re-estimate the running statistics of `params` on up to `samples` unlabeled
/// inputs of `task`'s train pool, taken at an even stride. `samples == 0` is a no-op.
///
/// Meta-learned features are sensitive to small shifts in batch statistics,
/// so statistics averaged over the meta-training stream can be far from those
/// of a particular target task. Only inputs are read; labels are never touched.
pub fn calibrate_to_task<L: Learner + ?Sized>(
    learner: &L,
    params: &ParamSet,
    task: &TaskDataset,
    samples: usize,
) -> Result<ParamSet> {
    let pool = task.train_pool();
    if samples == 0 || pool.is_empty() {
        return Ok(params.clone());
    }
    let stride = pool.len().div_ceil(samples);
    let ids: Vec<usize> = pool.iter().step_by(stride).copied().collect();
    let inputs = task.inputs(&ids)?;
    // Fixed stream so that calibration is a pure function of its inputs.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    recalibrate_running_stats(learner, params, &inputs, 2 * EVAL_CHUNK, &mut rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaOrder {
    /// Query-loss gradients at φ applied to θ.
    First,
    /// Exact differentiation through the inner steps (dense-only learners).
    Second,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    /// α, the inner SGD learning rate.
    pub inner_lr: f64,
    /// Adam learning rate of the meta-update.
    pub meta_lr: f64,
    /// Z, inner gradient steps per episode.
    pub inner_steps: usize,
    /// Augmented tasks per iteration.
    pub meta_batch: usize,
    pub iterations: u64,
    pub episode: EpisodeSpec,
    pub order: MetaOrder,
    pub augmentation: AugmentationConfig,
    /// Checkpoint cadence in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Meta-loss above this value counts as divergent.
    pub divergence_threshold: f64,
    /// Consecutive divergent iterations before training aborts.
    pub divergence_patience: u32,
    /// Evaluation cadence in iterations; 0 disables periodic evaluation.
    pub eval_every: u64,
    pub eval_tasks: usize,
    pub eval_seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: 0.01,
            meta_lr: 0.001,
            inner_steps: 1,
            meta_batch: 12,
            iterations: 12000,
            episode: EpisodeSpec::default(),
            order: MetaOrder::First,
            augmentation: AugmentationConfig::default(),
            checkpoint_every: 200,
            divergence_threshold: 1e3,
            divergence_patience: 50,
            eval_every: 0,
            eval_tasks: 4,
            eval_seed: 0,
        }
    }
}

impl MetaConfig {
    /// Schedule sized for a single CPU core: fewer iterations and smaller
    /// episodes, same learning rates.
    pub fn desk_scale() -> Self {
        MetaConfig {
            meta_batch: 2,
            iterations: 2000,
            episode: EpisodeSpec {
                k_max: 4,
                query_per_class: 4,
                ..EpisodeSpec::default()
            },
            ..MetaConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0) || !(self.meta_lr > 0.0) {
            return Err(Error::Parameter("learning rates must be positive".into()));
        }
        if self.inner_steps == 0 || self.meta_batch == 0 {
            return Err(Error::Parameter("inner steps and meta-batch must be at least 1".into()));
        }
        if self.episode.k_max == 0 || self.episode.query_per_class == 0 {
            return Err(Error::Parameter("episodes need a support budget and a query set".into()));
        }
        self.augmentation.validate()
    }
}

/// Summary of one meta-step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Mean query loss after adaptation.
    pub meta_loss: f64,
    /// Mean support loss before the first inner step.
    pub support_loss: f64,
    pub k_tilde: Vec<usize>,
    pub grad_norm: f64,
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    pub meta_loss: f64,
    pub support_loss: f64,
    pub eval_accuracy: Option<f64>,
}

pub struct MetaTrainOutcome {
    pub state: MetaState,
    pub log: Vec<LogRow>,
}

fn check_finite(loss: f64, step: usize, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            iteration: step as u64,
            message: format!("non-finite {what} loss"),
        })
    }
}

fn adapt(
    learner: &(impl Learner + ?Sized),
    theta: &ParamSet,
    support: &Batch,
    lr: f64,
    steps: usize,
    rng: &mut dyn RngCore,
) -> Result<(ParamSet, Vec<f64>)> {
    if steps == 0 {
        return Err(Error::Parameter("inner adaptation needs at least one step".into()));
    }
    let mut phi = theta.to_adapted();
    let mut losses = Vec::with_capacity(steps);
    for s in 0..steps {
        let (loss, grads, _) = loss_and_grads(learner, &phi, support, ForwardMode::Train, rng)?;
        check_finite(loss, s, "support")?;
        losses.push(loss);
        phi = sgd_step(&phi, &grads, lr)?;
    }
    Ok((phi, losses))
}

/// `Z` sequential SGD steps on the support loss, starting from θ.
///
/// Batchnorm uses batch statistics; running statistics are carried over from θ unchanged.
pub fn inner_adapt<L: Learner + ?Sized>(
    learner: &L,
    theta: &ParamSet,
    support: &Batch,
    lr: f64,
    steps: usize,
    rng: &mut dyn RngCore,
) -> Result<(ParamSet, Vec<f64>)> {
    adapt(learner, theta, support, lr, steps, rng)
}

struct TaskGradient {
    grads: ParamGrads,
    query_loss: f64,
    support_loss: f64,
    running: Vec<RunningUpdate>,
}

fn first_order_task(
    learner: &(impl Learner + ?Sized),
    theta: &ParamSet,
    episode: &Episode,
    config: &MetaConfig,
    rng: &mut dyn RngCore,
) -> Result<TaskGradient> {
    let (phi, losses) = adapt(learner, theta, &episode.support, config.inner_lr, config.inner_steps, rng)?;
    let (query_loss, grads, running) = loss_and_grads(learner, &phi, &episode.query, ForwardMode::Train, rng)?;
    Ok(TaskGradient {
        grads,
        query_loss,
        support_loss: losses[0],
        running,
    })
}

fn second_order_task(
    learner: &(impl Learner + ?Sized),
    theta: &ParamSet,
    episode: &Episode,
    config: &MetaConfig,
    rng: &mut dyn RngCore,
) -> Result<TaskGradient> {
    let mut tape = Tape::new();
    let vars = theta.bind(&mut tape);
    let trainable: Vec<usize> = (0..theta.len()).filter(|&i| theta.param(i).trainable).collect();
    let mut current = vars.clone();
    let mut support_loss = 0.0;
    for s in 0..config.inner_steps {
        let out = learner.loss(&mut tape, theta, &current, &episode.support, ForwardMode::Train, rng)?;
        let loss = tape.value(out.loss).item()?;
        check_finite(loss, s, "support")?;
        if s == 0 {
            support_loss = loss;
        }
        let wrt: Vec<_> = trainable.iter().map(|&i| current[i]).collect();
        let grads = tape.grad_graph(out.loss, &wrt)?;
        for (&i, g) in trainable.iter().zip(grads) {
            let step = tape.scale(g, config.inner_lr)?;
            current[i] = tape.sub(current[i], step)?;
        }
    }
    let out = learner.loss(&mut tape, theta, &current, &episode.query, ForwardMode::Train, rng)?;
    let query_loss = tape.value(out.loss).item()?;
    let running = out.running;
    let mut gm = tape.backward(out.loss)?;
    Ok(TaskGradient {
        grads: theta.collect_grads(&vars, &mut gm),
        query_loss,
        support_loss,
        running,
    })
}

/// Mean meta-gradient over `episodes`, summed in episode order.
pub fn meta_gradient<L: Learner + ?Sized>(
    learner: &L,
    theta: &ParamSet,
    episodes: &[Episode],
    config: &MetaConfig,
    rng: &mut dyn RngCore,
) -> Result<(ParamGrads, StepReport, Vec<Vec<RunningUpdate>>)> {
    if episodes.is_empty() {
        return Err(Error::Usage("meta-gradient over zero episodes".into()));
    }
    let scale = 1.0 / episodes.len() as f64;
    let mut total = ParamGrads::default();
    let mut running = Vec::with_capacity(episodes.len());
    let (mut meta_loss, mut support_loss) = (0.0, 0.0);
    for episode in episodes {
        let t = match config.order {
            MetaOrder::First => first_order_task(learner, theta, episode, config, rng)?,
            MetaOrder::Second => second_order_task(learner, theta, episode, config, rng)?,
        };
        total.add_scaled(&t.grads, scale)?;
        meta_loss += t.query_loss * scale;
        support_loss += t.support_loss * scale;
        running.push(t.running);
    }
    let report = StepReport {
        meta_loss,
        support_loss,
        k_tilde: episodes.iter().map(|e| e.k_tilde).collect(),
        grad_norm: total.global_norm(),
    };
    Ok((total, report, running))
}

/// One meta-update of θ over `tasks` (already augmented).
pub fn meta_step<L: Learner + ?Sized>(
    learner: &L,
    state: &MetaState,
    tasks: &[TaskDataset],
    config: &MetaConfig,
) -> Result<(MetaState, StepReport)> {
    let mut next = state.clone();
    let wrap = |task: &TaskDataset, e: Error| Error::Training {
        iteration: state.iteration,
        message: format!("task {}: {e}", task.task_id()),
    };
    let mut episodes = Vec::with_capacity(tasks.len());
    for task in tasks {
        episodes.push(sample_episode(task, &config.episode, &mut next.rngs.episode).map_err(|e| wrap(task, e))?);
    }
    let (grads, report, running) = meta_gradient(learner, &state.params, &episodes, config, &mut next.rngs.dropout)
        .map_err(|e| Error::Training {
            iteration: state.iteration,
            message: e.to_string(),
        })?;
    if !report.meta_loss.is_finite() {
        return Err(Error::Training {
            iteration: state.iteration,
            message: "non-finite meta-loss".into(),
        });
    }
    let (adam, params) = adam_step(&state.adam, &state.params, &grads, config.meta_lr)?;
    next.params = apply_running_updates(&params, &running)?;
    next.adam = adam;
    next.iteration += 1;
    Ok((next, report))
}

/// Draw `meta_batch` base tasks with replacement and augment each.
pub fn draw_meta_batch(registry: &[TaskDataset], config: &MetaConfig, rngs: &mut MetaRngs) -> Result<Vec<TaskDataset>> {
    if registry.is_empty() {
        return Err(Error::Usage("meta-training needs at least one base task".into()));
    }
    let mut tasks = Vec::with_capacity(config.meta_batch);
    for _ in 0..config.meta_batch {
        let base = &registry[rngs.tasks.random_range(0..registry.len())];
        tasks.push(augment_task(base, &config.augmentation, &mut rngs.augment)?);
    }
    Ok(tasks)
}

/// Post-adaptation query accuracy on a fixed set of augmented episodes with test-pool queries.
pub fn episodic_accuracy<L: Learner + ?Sized>(
    learner: &L,
    theta: &ParamSet,
    registry: &[TaskDataset],
    config: &MetaConfig,
) -> Result<f64> {
    let mut rngs = MetaRngs::from_seed(config.eval_seed);
    let spec = EpisodeSpec {
        query_from: Split::Test,
        ..config.episode
    };
    let mut correct = 0usize;
    let mut total = 0usize;
    for _ in 0..config.eval_tasks {
        let base = &registry[rngs.tasks.random_range(0..registry.len())];
        let task = augment_task(base, &config.augmentation, &mut rngs.augment)?;
        let episode = sample_episode(&task, &spec, &mut rngs.episode)?;
        let (phi, _) = inner_adapt(
            learner,
            theta,
            &episode.support,
            config.inner_lr,
            config.inner_steps,
            &mut rngs.dropout,
        )?;
        let probs = predict_probs(learner, &phi, &episode.query.inputs, ForwardMode::Eval, &mut rngs.dropout, EVAL_CHUNK)?;
        let preds = argmax_rows(probs.data(), probs.shape()[1]);
        correct += preds.iter().zip(&episode.query.labels).filter(|(p, y)| p == y).count();
        total += preds.len();
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

const LOG_HEADER: &str = "iteration,meta_loss,support_loss,eval_accuracy";

fn append_log(path: &Path, row: &LogRow) -> Result<()> {
    use std::io::Write;
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let acc = row.eval_accuracy.map(|a| a.to_string()).unwrap_or_default();
    let mut line = String::new();
    if fresh {
        line.push_str(LOG_HEADER);
        line.push('\n');
    }
    line.push_str(&format!("{},{},{},{}\n", row.iteration, row.meta_loss, row.support_loss, acc));
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Subdirectory of the last checkpoint of a meta-training run.
pub const FINAL_CHECKPOINT: &str = "final";

/// Directory of the checkpoint written after `iteration` iterations.
pub fn checkpoint_dir(out_dir: &Path, iteration: u64) -> std::path::PathBuf {
    out_dir.join(format!("iter_{iteration:06}"))
}

/// Run meta-training from `state` until `config.iterations`.
///
/// With `out_dir`, rows are appended to `out_dir/training_log.csv` and
/// checkpoints are written to `out_dir/iter_NNNNNN` every `checkpoint_every`
/// iterations and to `out_dir/final` at the end.
pub fn meta_train<L: Learner + ?Sized>(
    learner: &L,
    registry: &[TaskDataset],
    config: &MetaConfig,
    mut state: MetaState,
    out_dir: Option<&Path>,
) -> Result<MetaTrainOutcome> {
    config.validate()?;
    let mut log = Vec::new();
    let mut divergent = 0u32;
    while state.iteration < config.iterations {
        let tasks = draw_meta_batch(registry, config, &mut state.rngs)?;
        let (next, report) = meta_step(learner, &state, &tasks, config)?;
        state = next;
        if report.meta_loss > config.divergence_threshold {
            divergent += 1;
            if divergent >= config.divergence_patience {
                return Err(Error::Training {
                    iteration: state.iteration,
                    message: format!(
                        "diverged: meta-loss above {} for {divergent} iterations (last {:.3e}, grad norm {:.3e})",
                        config.divergence_threshold, report.meta_loss, report.grad_norm
                    ),
                });
            }
        } else {
            divergent = 0;
        }
        let eval_accuracy = if config.eval_every > 0 && state.iteration.is_multiple_of(config.eval_every) {
            Some(episodic_accuracy(learner, &state.params, registry, config)?)
        } else {
            None
        };
        let row = LogRow {
            iteration: state.iteration,
            meta_loss: report.meta_loss,
            support_loss: report.support_loss,
            eval_accuracy,
        };
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            append_log(&dir.join("training_log.csv"), &row)?;
            if config.checkpoint_every > 0 && state.iteration.is_multiple_of(config.checkpoint_every) {
                state.save(&checkpoint_dir(dir, state.iteration))?;
            }
        }
        if state.iteration.is_multiple_of(100) {
            log::info!(
                "iteration {} meta-loss {:.4} support-loss {:.4}",
                state.iteration,
                report.meta_loss,
                report.support_loss
            );
        }
        log.push(row);
    }
    if let Some(dir) = out_dir {
        state.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(MetaTrainOutcome { state, log })
}

/// Index of the larger probability per row; ties go to class 0.
pub fn argmax_rows(probs: &[f64], classes: usize) -> Vec<usize> {
    probs
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (k, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Predictions of `params` on `ids` of `task`, in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub accuracy: f64,
}

pub fn evaluate<L: Learner + ?Sized>(learner: &L, params: &ParamSet, task: &TaskDataset, ids: &[usize]) -> Result<Evaluation> {
    let inputs = task.inputs(ids)?;
    evaluate_inputs(learner, params, &inputs, task.labels(ids))
}

fn evaluate_inputs<L: Learner + ?Sized>(
    learner: &L,
    params: &ParamSet,
    inputs: &crate::tensor::Tensor,
    labels: Vec<usize>,
) -> Result<Evaluation> {
    if labels.is_empty() {
        return Err(Error::Usage("evaluation on an empty sample set".into()));
    }
    // Eval mode draws no randomness; the rng is never advanced.
    let mut unused = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let probs = predict_probs(learner, params, inputs, ForwardMode::Eval, &mut unused, EVAL_CHUNK)?;
    let predictions = argmax_rows(probs.data(), probs.shape()[1]);
    let correct = predictions.iter().zip(&labels).filter(|(p, y)| p == y).count();
    Ok(Evaluation {
        accuracy: correct as f64 / labels.len() as f64,
        predictions,
        labels,
    })
}

/// [`calibrate_to_task`] followed by [`evaluate`] on the test pool.
pub fn evaluate_on_task<L: Learner + ?Sized>(
    learner: &L,
    params: &ParamSet,
    task: &TaskDataset,
    calibration: usize,
) -> Result<(ParamSet, Evaluation)> {
    let calibrated = calibrate_to_task(learner, params, task, calibration)?;
    let evaluation = evaluate(learner, &calibrated, task, task.test_pool())?;
    Ok((calibrated, evaluation))
}

/// Test-pool accuracy before and after each of `steps` adaptation steps.
#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    /// `curve[s]` is the accuracy after `s` steps.
    pub curve: Vec<f64>,
    /// `evaluations[s]` holds the predictions after `s` steps.
    pub evaluations: Vec<Evaluation>,
    /// Final parameters, with calibrated statistics when calibration is on.
    pub params: ParamSet,
}

/// Adapt θ on `train_ids` for `steps` SGD steps at rate `lr`, evaluating on the test pool after each.
///
/// Before every evaluation the running statistics are re-estimated with
/// [`calibrate_to_task`] on `calibration` pool samples.
#[allow(clippy::too_many_arguments)]
pub fn adapt_and_eval<L: Learner + ?Sized>(
    learner: &L,
    theta: &ParamSet,
    task: &TaskDataset,
    train_ids: &[usize],
    steps: usize,
    lr: f64,
    calibration: usize,
    rng: &mut dyn RngCore,
) -> Result<AdaptOutcome> {
    if train_ids.len() > task.train_pool().len() {
        return Err(Error::Usage(format!(
            "{} training samples requested from a pool of {}",
            train_ids.len(),
            task.train_pool().len()
        )));
    }
    let test_inputs = task.inputs(task.test_pool())?;
    let test_labels = task.labels(task.test_pool());
    let mut phi = theta.to_adapted();
    let mut calibrated = calibrate_to_task(learner, &phi, task, calibration)?;
    let mut evaluations = vec![evaluate_inputs(learner, &calibrated, &test_inputs, test_labels.clone())?];
    if !train_ids.is_empty() {
        let support = task.batch(train_ids)?;
        for _ in 0..steps {
            phi = inner_adapt(learner, &phi, &support, lr, 1, rng)?.0;
            calibrated = calibrate_to_task(learner, &phi, task, calibration)?;
            evaluations.push(evaluate_inputs(learner, &calibrated, &test_inputs, test_labels.clone())?);
        }
    }
    Ok(AdaptOutcome {
        curve: evaluations.iter().map(|e| e.accuracy).collect(),
        evaluations,
        params: calibrated,
    })
}

#[cfg(test)]
mod tests;
