use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{Split, TaskDataset};
use crate::error::{Error, Result};
use crate::model::Batch;

/// How support and query sets are drawn for one inner adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    /// Support budget `K` per class.
    pub k_max: usize,
    /// Draw `K̃` uniformly from `1..=K` per episode instead of using `K`.
    pub variable: bool,
    /// `K̃` samples from each class; otherwise `2·K̃` samples from the whole pool.
    pub balanced: bool,
    pub query_per_class: usize,
    /// Pool the query set is drawn from.
    pub query_from: Split,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            k_max: 8,
            variable: true,
            balanced: true,
            query_per_class: 8,
            query_from: Split::Train,
        }
    }
}

impl EpisodeSpec {
    /// The same spec with budget `K = k`.
    pub fn with_k(self, k: usize) -> Self {
        EpisodeSpec { k_max: k, ..self }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub k_tilde: usize,
    pub support_ids: Vec<usize>,
    pub query_ids: Vec<usize>,
    pub support: Batch,
    pub query: Batch,
}

fn take(ids: &mut Vec<usize>, n: usize, task: &TaskDataset, class: Option<usize>, rng: &mut dyn RngCore) -> Result<Vec<usize>> {
    if ids.len() < n {
        let who = match class {
            Some(c) => format!("class {c}"),
            None => "the pool".to_string(),
        };
        return Err(Error::Data(format!(
            "task {}: {who} has {} samples left, episode needs {n}",
            task.task_id(),
            ids.len()
        )));
    }
    ids.shuffle(rng);
    Ok(ids.drain(..n).collect())
}

/// Draw a support/query episode from `task`. Support always comes from the train pool.
pub fn sample_episode(task: &TaskDataset, spec: &EpisodeSpec, rng: &mut dyn RngCore) -> Result<Episode> {
    if spec.k_max == 0 {
        return Err(Error::Parameter("episode budget K must be at least 1".into()));
    }
    let k_tilde = if spec.variable {
        rng.random_range(1..=spec.k_max)
    } else {
        spec.k_max
    };
    // Check the full budget so that the pool requirement does not depend on the draw.
    let mut remaining: Vec<Vec<usize>> = (0..2).map(|c| task.class_ids(task.train_pool(), c)).collect();
    let mut support_ids = Vec::with_capacity(2 * k_tilde);
    if spec.balanced {
        for (c, ids) in remaining.iter().enumerate() {
            if ids.len() < spec.k_max {
                return Err(Error::Data(format!(
                    "task {}: class {c} has {} train samples, budget K = {}",
                    task.task_id(),
                    ids.len(),
                    spec.k_max
                )));
            }
        }
        for (c, ids) in remaining.iter_mut().enumerate() {
            support_ids.extend(take(ids, k_tilde, task, Some(c), rng)?);
        }
    } else {
        let mut pool: Vec<usize> = task.train_pool().to_vec();
        if pool.len() < 2 * spec.k_max {
            return Err(Error::Data(format!(
                "task {}: train pool has {} samples, budget 2K = {}",
                task.task_id(),
                pool.len(),
                2 * spec.k_max
            )));
        }
        support_ids = take(&mut pool, 2 * k_tilde, task, None, rng)?;
        for ids in remaining.iter_mut() {
            ids.retain(|i| !support_ids.contains(i));
        }
    }
    let mut query_ids = Vec::with_capacity(2 * spec.query_per_class);
    if spec.query_per_class > 0 {
        let mut source = match spec.query_from {
            Split::Train => remaining,
            Split::Test => (0..2).map(|c| task.class_ids(task.test_pool(), c)).collect(),
        };
        for (c, ids) in source.iter_mut().enumerate() {
            query_ids.extend(take(ids, spec.query_per_class, task, Some(c), rng)?);
        }
    }
    let support = task.batch(&support_ids)?;
    let query = task.batch(&query_ids)?;
    Ok(Episode {
        k_tilde,
        support_ids,
        query_ids,
        support,
        query,
    })
}
