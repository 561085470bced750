use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::{index, IndexedRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{score_samples, select_queries, ActiveConfig, LabelSource, PoolState, QueryRecord, Strategy};
use crate::error::{Error, Result};
use crate::meta::{calibrate_to_task, evaluate_on_task, inner_adapt, Evaluation, RngSnapshot};
use crate::model::{Batch, Learner, ParamSet};
use crate::tasks::TaskDataset;
use crate::tensor::{load_tensors, save_tensors};

const SNAPSHOT_FILE: &str = "session.json";
const PHI_DIR: &str = "phi";

/// A sample waiting for its label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingQuery {
    pub sample_id: usize,
    pub entropy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    AwaitingLabels,
    /// Every pending query is labeled; the next round has not been computed yet.
    Adapting,
    Done,
}

/// Reply to a single label submission.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub sample_id: usize,
    pub accepted: bool,
    /// The sample already had a label; the first one is kept.
    pub conflict: bool,
    pub status: SessionStatus,
}

/// What happened in one label→adapt round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub labeled: usize,
    /// Support loss before the round's first adaptation step.
    pub support_loss: f64,
    pub mean_query_entropy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ActiveOutcome {
    /// Test-pool evaluation of the final φ.
    pub evaluation: Evaluation,
    pub params: ParamSet,
    pub pool: PoolState,
    pub log: Vec<RoundLog>,
}

/// Source of labels for [`active_loop`].
pub trait Labeler {
    fn source(&self) -> LabelSource;

    /// Labels for `ids` in order, or `None` when the labeler cannot answer now.
    fn label(&mut self, task: &TaskDataset, ids: &[usize]) -> Result<Option<Vec<usize>>>;
}

/// Answers with the task's ground-truth labels.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleLabeler;

impl Labeler for OracleLabeler {
    fn source(&self) -> LabelSource {
        LabelSource::Oracle
    }

    fn label(&mut self, task: &TaskDataset, ids: &[usize]) -> Result<Option<Vec<usize>>> {
        Ok(Some(task.labels(ids)))
    }
}

/// Step-wise active labeling: pending queries are labeled through
/// [`ActiveSession::submit`], then [`ActiveSession::advance`] adapts and
/// selects the next batch.
///
/// The order in which labels arrive within a round does not matter; the
/// session applies them in query order.
pub struct ActiveSession<L: Learner> {
    learner: L,
    theta: ParamSet,
    phi: ParamSet,
    task: Arc<TaskDataset>,
    config: ActiveConfig,
    pool: PoolState,
    pending: Vec<PendingQuery>,
    received: BTreeMap<usize, (usize, LabelSource)>,
    round: usize,
    rng: ChaCha8Rng,
    log: Vec<RoundLog>,
    outcome: Option<ActiveOutcome>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    task_id: String,
    theta_checksum: String,
    config: ActiveConfig,
    round: usize,
    pool: PoolState,
    pending: Vec<PendingQuery>,
    received: Vec<(usize, usize, LabelSource)>,
    rng: RngSnapshot,
    log: Vec<RoundLog>,
}

impl<L: Learner> ActiveSession<L> {
    /// Start a session whose first queries are one random train sample per class.
    pub fn new(learner: L, theta: &ParamSet, task: Arc<TaskDataset>, config: ActiveConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if (learner.dropout_rate() - config.dropout_rate).abs() > 1e-12 {
            return Err(Error::Parameter(format!(
                "learner dropout {} differs from the configured {}",
                learner.dropout_rate(),
                config.dropout_rate
            )));
        }
        if config.budget < 2 || config.budget > task.train_pool().len() {
            return Err(Error::Parameter(format!(
                "budget {} outside 2..={} for task {}",
                config.budget,
                task.train_pool().len(),
                task.task_id()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pending = Vec::with_capacity(2);
        for class in 0..2 {
            let ids = task.class_ids(task.train_pool(), class);
            let &id = ids
                .choose(&mut rng)
                .ok_or_else(|| Error::Data(format!("task {} has no class-{class} train samples", task.task_id())))?;
            pending.push(PendingQuery {
                sample_id: id,
                entropy: None,
            });
        }
        let pool = PoolState {
            labeled: Vec::new(),
            unlabeled: task
                .train_pool()
                .iter()
                .copied()
                .filter(|id| pending.iter().all(|q| q.sample_id != *id))
                .collect(),
            budget_remaining: config.budget - pending.len(),
            history: Vec::new(),
        };
        Ok(ActiveSession {
            learner,
            phi: theta.to_adapted(),
            theta: theta.clone(),
            task,
            config,
            pool,
            pending,
            received: BTreeMap::new(),
            round: 0,
            rng,
            log: Vec::new(),
            outcome: None,
        })
    }

    pub fn task(&self) -> &TaskDataset {
        &self.task
    }

    pub fn config(&self) -> &ActiveConfig {
        &self.config
    }

    pub fn pool(&self) -> &PoolState {
        &self.pool
    }

    pub fn pending(&self) -> &[PendingQuery] {
        &self.pending
    }

    /// Labels received for the current round, by sample id.
    pub fn received(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.received.iter().map(|(&id, &(label, _))| (id, label))
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn log(&self) -> &[RoundLog] {
        &self.log
    }

    /// Current adapted parameters (θ before the first round).
    pub fn phi(&self) -> &ParamSet {
        &self.phi
    }

    pub fn outcome(&self) -> Option<&ActiveOutcome> {
        self.outcome.as_ref()
    }

    pub fn status(&self) -> SessionStatus {
        if self.outcome.is_some() {
            SessionStatus::Done
        } else if self.received.len() == self.pending.len() {
            SessionStatus::Adapting
        } else {
            SessionStatus::AwaitingLabels
        }
    }

    /// Record a label for a pending sample. Repeated labels are acknowledged
    /// with a conflict flag and leave the first label in place.
    pub fn submit(&mut self, sample_id: usize, label: usize, source: LabelSource) -> Result<SubmitAck> {
        let known = self.received.contains_key(&sample_id) || self.pool.labeled.iter().any(|&(id, _)| id == sample_id);
        if known {
            return Ok(SubmitAck {
                sample_id,
                accepted: false,
                conflict: true,
                status: self.status(),
            });
        }
        if !self.pending.iter().any(|q| q.sample_id == sample_id) {
            return Err(Error::Usage(format!("sample {sample_id} is not pending")));
        }
        if label > 1 {
            return Err(Error::Parameter(format!("label {label} is not 0 or 1")));
        }
        self.received.insert(sample_id, (label, source));
        Ok(SubmitAck {
            sample_id,
            accepted: true,
            conflict: false,
            status: self.status(),
        })
    }

    /// Apply the round's labels, adapt, and either select the next queries or finish.
    pub fn advance(&mut self) -> Result<SessionStatus> {
        match self.status() {
            SessionStatus::Adapting => {}
            SessionStatus::Done => return Ok(SessionStatus::Done),
            SessionStatus::AwaitingLabels => {
                return Err(Error::Usage(format!(
                    "{} of {} queries still unlabeled",
                    self.pending.len() - self.received.len(),
                    self.pending.len()
                )))
            }
        }
        let mut entropies = Vec::new();
        for q in self.pending.drain(..) {
            let (label, label_source) = self.received[&q.sample_id];
            self.pool.labeled.push((q.sample_id, label));
            self.pool.history.push(QueryRecord {
                round: self.round,
                sample_id: q.sample_id,
                entropy: q.entropy,
                label_source,
                label,
            });
            entropies.extend(q.entropy);
        }
        self.received.clear();

        let ids = self.pool.labeled_ids();
        let labels = self.pool.labeled.iter().map(|&(_, y)| y).collect();
        let support = Batch::new(self.task.inputs(&ids)?, labels)?;
        let start = if self.config.continue_from_phi { &self.phi } else { &self.theta };
        let (phi, losses) = inner_adapt(
            &self.learner,
            start,
            &support,
            self.config.inner_lr,
            self.config.inner_steps,
            &mut self.rng,
        )?;
        self.phi = phi;
        self.log.push(RoundLog {
            round: self.round,
            labeled: ids.len(),
            support_loss: losses[0],
            mean_query_entropy: (!entropies.is_empty()).then(|| entropies.iter().sum::<f64>() / entropies.len() as f64),
        });
        self.round += 1;

        let out_of_rounds = self.config.rounds > 0 && self.round > self.config.rounds;
        if self.pool.budget_remaining == 0 || self.pool.unlabeled.is_empty() || out_of_rounds {
            return self.finish();
        }
        self.pending = self.next_queries()?;
        if self.pending.is_empty() {
            return self.finish();
        }
        Ok(self.status())
    }

    fn next_queries(&mut self) -> Result<Vec<PendingQuery>> {
        let want = self.config.query_batch.min(self.pool.budget_remaining);
        match self.config.strategy {
            Strategy::Random => {
                let n = self.pool.unlabeled.len();
                let mut picks = index::sample(&mut self.rng, n, want.min(n)).into_vec();
                picks.sort_unstable();
                let chosen: Vec<usize> = picks.iter().map(|&i| self.pool.unlabeled[i]).collect();
                self.pool.unlabeled.retain(|id| !chosen.contains(id));
                self.pool.budget_remaining -= chosen.len();
                Ok(chosen
                    .into_iter()
                    .map(|sample_id| PendingQuery {
                        sample_id,
                        entropy: None,
                    })
                    .collect())
            }
            Strategy::Entropy => {
                let n = self.pool.unlabeled.len();
                let candidates: Vec<usize> = if self.config.candidates == 0 || self.config.candidates >= n {
                    self.pool.unlabeled.clone()
                } else {
                    let mut picks = index::sample(&mut self.rng, n, self.config.candidates).into_vec();
                    picks.sort_unstable();
                    picks.iter().map(|&i| self.pool.unlabeled[i]).collect()
                };
                let scoring = calibrate_to_task(&self.learner, &self.phi, &self.task, self.config.calibration)?;
                let scores = score_samples(
                    &self.learner,
                    &scoring,
                    &self.task,
                    &candidates,
                    self.config.mc_passes,
                    &mut self.rng,
                )?;
                Ok(select_queries(&mut self.pool, &scores, want)
                    .into_iter()
                    .map(|s| PendingQuery {
                        sample_id: s.sample_id,
                        entropy: Some(s.entropy),
                    })
                    .collect())
            }
        }
    }

    fn finish(&mut self) -> Result<SessionStatus> {
        let (params, evaluation) = evaluate_on_task(&self.learner, &self.phi, &self.task, self.config.calibration)?;
        self.outcome = Some(ActiveOutcome {
            evaluation,
            params,
            pool: self.pool.clone(),
            log: self.log.clone(),
        });
        Ok(SessionStatus::Done)
    }

    /// Ask `labeler` for every pending batch until the session finishes or the labeler defers.
    pub fn run(mut self, labeler: &mut dyn Labeler, checkpoint: Option<&Path>) -> Result<LoopResult<L>> {
        loop {
            if let Some(outcome) = self.outcome.take() {
                return Ok(LoopResult::Finished(outcome));
            }
            let ids: Vec<usize> = self
                .pending
                .iter()
                .map(|q| q.sample_id)
                .filter(|id| !self.received.contains_key(id))
                .collect();
            if !ids.is_empty() {
                let Some(labels) = labeler.label(&self.task, &ids)? else {
                    if let Some(dir) = checkpoint {
                        self.save(dir)?;
                    }
                    return Ok(LoopResult::Suspended(Box::new(self)));
                };
                if labels.len() != ids.len() {
                    return Err(Error::Usage(format!("labeler answered {} of {} queries", labels.len(), ids.len())));
                }
                for (&id, &label) in ids.iter().zip(&labels) {
                    self.submit(id, label, labeler.source())?;
                }
            }
            self.advance()?;
        }
    }

    /// Write a resumable snapshot: `dir/session.json` plus the current φ.
    pub fn save(&self, dir: &Path) -> Result<()> {
        if self.outcome.is_some() {
            return Err(Error::Usage("a finished session has nothing to resume".into()));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_tensors(&dir.join(PHI_DIR), &self.phi.to_named_tensors())?;
        let snapshot = Snapshot {
            task_id: self.task.task_id().to_string(),
            theta_checksum: format!("{:016x}", self.theta.checksum()),
            config: self.config.clone(),
            round: self.round,
            pool: self.pool.clone(),
            pending: self.pending.clone(),
            received: self.received.iter().map(|(&id, &(y, s))| (id, y, s)).collect(),
            rng: RngSnapshot::capture(&self.rng),
            log: self.log.clone(),
        };
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, serde_json::to_string_pretty(&snapshot)?).map_err(|e| Error::io(&path, e))
    }

    /// Resume a session written by [`ActiveSession::save`] for the same θ and task.
    pub fn load(dir: &Path, learner: L, theta: &ParamSet, task: Arc<TaskDataset>) -> Result<Self> {
        let path = dir.join(SNAPSHOT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let s: Snapshot = serde_json::from_str(&text).map_err(|e| Error::ingestion(&path, e.to_string()))?;
        if s.task_id != task.task_id() {
            return Err(Error::ingestion(&path, format!("snapshot is for task {}", s.task_id)));
        }
        if s.theta_checksum != format!("{:016x}", theta.checksum()) {
            return Err(Error::ingestion(&path, "snapshot was taken with different meta-parameters"));
        }
        let phi = theta
            .to_adapted()
            .load_named_tensors(&load_tensors(&dir.join(PHI_DIR))?)?;
        Ok(ActiveSession {
            learner,
            theta: theta.clone(),
            phi,
            task,
            config: s.config,
            pool: s.pool,
            pending: s.pending,
            received: s.received.into_iter().map(|(id, y, src)| (id, (y, src))).collect(),
            round: s.round,
            rng: s.rng.restore()?,
            log: s.log,
            outcome: None,
        })
    }
}

pub enum LoopResult<L: Learner> {
    Finished(ActiveOutcome),
    /// The labeler deferred; the session can be resumed with [`ActiveSession::run`].
    Suspended(Box<ActiveSession<L>>),
}

/// Run a complete active-labeling session on `task` starting from θ.
pub fn active_loop<L: Learner>(
    learner: L,
    theta: &ParamSet,
    task: Arc<TaskDataset>,
    config: ActiveConfig,
    seed: u64,
    labeler: &mut dyn Labeler,
    checkpoint: Option<&Path>,
) -> Result<LoopResult<L>> {
    ActiveSession::new(learner, theta, task, config, seed)?.run(labeler, checkpoint)
}
