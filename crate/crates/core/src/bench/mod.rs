//! Method grid, metrics with confidence intervals, training-size sweeps and
//! result export.

mod export;
mod metrics;
mod world;

pub use export::{
    curves_csv, load_run_results, metrics_csv, save_run_results, sweep_csv, write_curves_csv, write_metrics_csv,
    write_sweep_csv, RUNS_FILE,
};
pub use metrics::{
    aggregate, compute_metrics, confidence_interval, paired_wins, sign_test, AggregateMetrics, Confusion, RunMetrics,
    Summary,
};
pub use world::{DistractorScope, World, WorldConfig};

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::active::{active_loop, ActiveConfig, LoopResult, OracleLabeler, Strategy};
use crate::error::{Error, Result};
use crate::meta::{
    adapt_and_eval, baseline_vanilla, CALIBRATION_SAMPLES, fine_tune, meta_train, pretrain_transfer, MetaConfig, MetaState, TrainSpec,
};
use crate::model::{Classifier, ModelConfig, ParamSet};
use crate::tasks::{AugmentationConfig, TaskDataset};

/// Rows of the method grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    VanillaLimit,
    VanillaFull,
    Transfer,
    Maml,
    AgilePhase1,
    AgilePhase2,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::VanillaLimit,
        Method::VanillaFull,
        Method::Transfer,
        Method::Maml,
        Method::AgilePhase1,
        Method::AgilePhase2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::VanillaLimit => "vanilla_limit",
            Method::VanillaFull => "vanilla_full",
            Method::Transfer => "transfer",
            Method::Maml => "maml",
            Method::AgilePhase1 => "agile_phase1",
            Method::AgilePhase2 => "agile_phase2",
        }
    }

    /// Default training size, gradient updates and meta-task source.
    pub fn shape(self) -> (Budget, usize, MetaTaskSource) {
        match self {
            Method::VanillaLimit => (Budget::Percent(1.0), 100, MetaTaskSource::None),
            Method::VanillaFull => (Budget::Percent(60.0), 100, MetaTaskSource::None),
            Method::Transfer => (Budget::Percent(1.0), 100, MetaTaskSource::Base),
            Method::Maml => (Budget::Percent(1.0), 1, MetaTaskSource::Base),
            Method::AgilePhase1 | Method::AgilePhase2 => (Budget::Percent(1.0), 1, MetaTaskSource::Augmented),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which meta tasks a method learns from before seeing the real task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaTaskSource {
    None,
    Base,
    Augmented,
}

/// A labeled-sample budget: an absolute count or a percentage of the task size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BudgetRepr", into = "BudgetRepr")]
pub enum Budget {
    Count(usize),
    Percent(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum BudgetRepr {
    Count(usize),
    Text(String),
}

impl TryFrom<BudgetRepr> for Budget {
    type Error = String;

    fn try_from(r: BudgetRepr) -> std::result::Result<Self, String> {
        match r {
            BudgetRepr::Count(n) => Ok(Budget::Count(n)),
            BudgetRepr::Text(s) => s.parse(),
        }
    }
}

impl From<Budget> for BudgetRepr {
    fn from(b: Budget) -> Self {
        match b {
            Budget::Count(n) => BudgetRepr::Count(n),
            Budget::Percent(_) => BudgetRepr::Text(b.to_string()),
        }
    }
}

impl std::str::FromStr for Budget {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if let Some(p) = s.strip_suffix('%') {
            let v: f64 = p.trim().parse().map_err(|_| format!("invalid percentage {s:?}"))?;
            if !(v > 0.0 && v <= 100.0) {
                return Err(format!("percentage {v} outside (0, 100]"));
            }
            Ok(Budget::Percent(v))
        } else {
            s.parse().map(Budget::Count).map_err(|_| format!("invalid budget {s:?}"))
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Count(n) => write!(f, "{n}"),
            Budget::Percent(p) => write!(f, "{p}%"),
        }
    }
}

impl Budget {
    /// Sample count for a task of `task_size` samples whose train pool holds `pool`.
    ///
    /// Percentages are of the whole task, floored, and at least 2 so that both
    /// classes can be represented.
    pub fn resolve(&self, task_size: usize, pool: usize) -> Result<usize> {
        let n = match *self {
            Budget::Count(n) => n,
            Budget::Percent(p) => ((p / 100.0 * task_size as f64 + 1e-9).floor() as usize).max(2),
        };
        if n == 0 || n > pool {
            return Err(Error::Parameter(format!("budget {self} = {n} samples, train pool holds {pool}")));
        }
        Ok(n)
    }
}

/// One row of the method grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodConfig {
    pub method: Method,
    pub n_train: Budget,
    pub gradient_updates: usize,
    pub meta_task_source: MetaTaskSource,
    /// Base seed; run `r` uses `seed + r`.
    pub seed: u64,
}

impl MethodConfig {
    /// The grid's default row for `method`.
    pub fn table(method: Method, seed: u64) -> Self {
        let (n_train, gradient_updates, meta_task_source) = method.shape();
        MethodConfig {
            method,
            n_train,
            gradient_updates,
            meta_task_source,
            seed,
        }
    }

    pub fn with_budget(self, n_train: Budget) -> Self {
        MethodConfig { n_train, ..self }
    }

    /// Updates and meta-task source must match the method's row; the training size is free.
    pub fn validate(&self) -> Result<()> {
        let (_, updates, source) = self.method.shape();
        if self.gradient_updates != updates || self.meta_task_source != source {
            return Err(Error::Parameter(format!(
                "{} uses {updates} gradient updates and {source:?} meta tasks, got {} and {:?}",
                self.method, self.gradient_updates, self.meta_task_source
            )));
        }
        Ok(())
    }
}

/// Full benchmark configuration; every section has defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub model: ModelConfig,
    pub world: WorldConfig,
    /// Meta-training schedule; its augmentation applies to augmented meta tasks.
    pub meta: MetaConfig,
    pub active: ActiveConfig,
    /// Supervised training of the vanilla baselines and transfer fine-tuning.
    pub vanilla: TrainSpec,
    /// Transfer pre-training, per meta task.
    pub pretrain: TrainSpec,
    pub methods: Vec<MethodConfig>,
    /// Independent seeded runs per method.
    pub runs: usize,
    /// Adaptation-curve length in gradient steps.
    pub curve_steps: usize,
    /// Pool samples used to re-estimate batchnorm statistics before evaluation; 0 disables.
    pub calibration: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let seed = 0;
        BenchConfig {
            model: ModelConfig {
                input_shape: (100, 100, 7),
                ..ModelConfig::default()
            },
            world: WorldConfig {
                patch_size: 100,
                ..WorldConfig::default()
            },
            meta: MetaConfig {
                iterations: 12000,
                ..MetaConfig::default()
            },
            active: ActiveConfig::default(),
            vanilla: TrainSpec::default(),
            pretrain: TrainSpec::default(),
            methods: Method::ALL.iter().map(|&m| MethodConfig::table(m, seed)).collect(),
            runs: 10,
            curve_steps: 10,
            calibration: CALIBRATION_SAMPLES,
            seed,
        }
    }
}

impl BenchConfig {
    /// Small patches and a short meta-training schedule that run on one CPU core.
    pub fn desk_scale() -> Self {
        BenchConfig {
            model: ModelConfig::default(),
            world: WorldConfig::default(),
            meta: MetaConfig::desk_scale(),
            ..BenchConfig::default()
        }
    }

    /// Override the seed of the config and of every method row.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        for m in &mut self.methods {
            m.seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.world.validate()?;
        self.meta.validate()?;
        self.active.validate()?;
        if self.runs == 0 {
            return Err(Error::Parameter("at least one run is required".into()));
        }
        let (h, w, c) = self.model.input_shape;
        if h != self.world.patch_size || w != self.world.patch_size || c != self.world.channels {
            return Err(Error::Parameter(format!(
                "model input {h}x{w}x{c} does not match {}x{}x{} world patches",
                self.world.patch_size, self.world.patch_size, self.world.channels
            )));
        }
        if (self.active.dropout_rate - self.model.dropout_rate).abs() > 1e-12 {
            return Err(Error::Parameter(format!(
                "active dropout {} differs from the model's {}",
                self.active.dropout_rate, self.model.dropout_rate
            )));
        }
        self.methods.iter().try_for_each(MethodConfig::validate)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::ingestion(path, e.to_string()))
    }
}

/// Outcome of one method on one real task in one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRun {
    pub seed: u64,
    pub task_id: String,
    pub samples: usize,
    pub metrics: Option<RunMetrics>,
    /// Test accuracy after `0..=curve_steps` gradient steps.
    pub curve: Vec<f64>,
    pub error: Option<String>,
}

/// Everything one method row produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: MethodConfig,
    pub runs: Vec<TaskRun>,
    /// Over every successful task run; absent if all failed.
    pub aggregate: Option<AggregateMetrics>,
    /// Kept out of the serialized file so that results compare bit-identically.
    #[serde(skip)]
    pub wall_clock_secs: f64,
    pub artifacts: Vec<PathBuf>,
}

impl RunResult {
    /// Resolved sample count, when every task run used the same one.
    pub fn samples(&self) -> Option<usize> {
        let first = self.runs.first()?.samples;
        self.runs.iter().all(|r| r.samples == first).then_some(first)
    }
}

/// One point of a training-size sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub budget: Budget,
    pub result: RunResult,
}

/// `n` train ids of `task` with at least one per class, reproducibly from `rng`.
pub fn sample_train_ids(task: &TaskDataset, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let pool = task.train_pool();
    if n < 2 || n > pool.len() {
        return Err(Error::Parameter(format!(
            "cannot draw {n} samples with both classes from a pool of {}",
            pool.len()
        )));
    }
    let mut ids = Vec::with_capacity(n);
    for class in 0..2 {
        let members = task.class_ids(pool, class);
        let &id = members
            .choose(rng)
            .ok_or_else(|| Error::Data(format!("task {} has no class-{class} train samples", task.task_id())))?;
        ids.push(id);
    }
    let mut rest: Vec<usize> = pool.iter().copied().filter(|id| !ids.contains(id)).collect();
    rest.shuffle(rng);
    ids.extend(rest.into_iter().take(n - 2));
    Ok(ids)
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

/// Runs method rows, sharing meta-trained parameters across them.
///
/// Only the most recently used world is kept; a full-size world is close to a
/// gigabyte and is cheap to regenerate from its seed.
pub struct Bench {
    config: BenchConfig,
    learner: Classifier,
    meta_learner: Classifier,
    checkpoint_root: Option<PathBuf>,
    world: Option<(u64, World)>,
    thetas: HashMap<(MetaTaskSource, u64), ParamSet>,
    pretrained: HashMap<u64, ParamSet>,
}

impl Bench {
    /// `checkpoint_root` receives one meta-training directory per source and
    /// seed, named like `augmented-seed7`.
    pub fn new(config: BenchConfig, checkpoint_root: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let learner = Classifier::new(config.model.clone())?;
        let meta_learner = learner.with_dropout_rate(0.0)?;
        Ok(Bench {
            config,
            learner,
            meta_learner,
            checkpoint_root,
            world: None,
            thetas: HashMap::new(),
            pretrained: HashMap::new(),
        })
    }

    pub fn config(&self) -> &BenchConfig {
        &self.config
    }

    pub fn learner(&self) -> &Classifier {
        &self.learner
    }

    /// The synthetic or loaded world of run seed `seed`.
    pub fn world(&mut self, seed: u64) -> Result<&World> {
        if self.world.as_ref().is_none_or(|(s, _)| *s != seed) {
            self.world = None;
            self.world = Some((seed, World::build(&self.config.world, seed)?));
        }
        Ok(&self.world.as_ref().expect("just built").1)
    }

    /// Meta-trained θ for `source` in run `seed`; trained on first use.
    pub fn theta(&mut self, source: MetaTaskSource, seed: u64) -> Result<ParamSet> {
        if let Some(t) = self.thetas.get(&(source, seed)) {
            return Ok(t.clone());
        }
        let augmentation = match source {
            MetaTaskSource::None => return Err(Error::Usage("no meta-training without meta tasks".into())),
            MetaTaskSource::Base => AugmentationConfig::none(),
            MetaTaskSource::Augmented => {
                if self.config.meta.augmentation.is_disabled() {
                    return Err(Error::Parameter("augmented meta tasks need a non-zero augmentation probability".into()));
                }
                self.config.meta.augmentation
            }
        };
        let meta = MetaConfig {
            augmentation,
            ..self.config.meta.clone()
        };
        let registry = self.world(seed)?.meta_tasks.clone();
        let out_dir = self
            .checkpoint_root
            .as_ref()
            .map(|root| root.join(format!("{}-seed{seed}", source_name(source))));
        log::info!("meta-training {source:?} for seed {seed} ({} iterations)", meta.iterations);
        let state = MetaState::new(&self.meta_learner, seed)?;
        let outcome = meta_train(&self.meta_learner, &registry, &meta, state, out_dir.as_deref())?;
        self.thetas.insert((source, seed), outcome.state.params.clone());
        Ok(outcome.state.params)
    }

    /// Install externally trained meta-parameters for `source` and `seed`.
    pub fn set_theta(&mut self, source: MetaTaskSource, seed: u64, theta: ParamSet) {
        self.thetas.insert((source, seed), theta);
    }

    fn pretrained(&mut self, seed: u64) -> Result<ParamSet> {
        if let Some(p) = self.pretrained.get(&seed) {
            return Ok(p.clone());
        }
        let tasks = self.world(seed)?.meta_tasks.clone();
        let mut rng = stream(seed, 20);
        let p = pretrain_transfer(&self.learner, &tasks, &self.config.pretrain, &mut rng)?;
        self.pretrained.insert(seed, p.clone());
        Ok(p)
    }

    /// Evaluate one method row on every real task of every run.
    pub fn run_method(&mut self, mc: &MethodConfig) -> Result<RunResult> {
        mc.validate()?;
        let start = Instant::now();
        let mut runs = Vec::new();
        for r in 0..self.config.runs as u64 {
            let seed = mc.seed + r;
            let tasks = self.world(seed)?.real_tasks.clone();
            for (t, task) in tasks.iter().enumerate() {
                let samples = mc.n_train.resolve(task.train_pool().len() + task.test_pool().len(), task.train_pool().len());
                let n_resolved = samples.as_ref().copied().unwrap_or(0);
                let outcome = samples.and_then(|n| self.run_task(mc, seed, t as u64, task, n).map(|o| (n, o)));
                runs.push(match outcome {
                    Ok((n, (metrics, curve))) => TaskRun {
                        seed,
                        task_id: task.task_id().to_string(),
                        samples: n,
                        metrics: Some(metrics),
                        curve,
                        error: None,
                    },
                    Err(e) => {
                        log::warn!("{} on {} (seed {seed}) failed: {e}", mc.method, task.task_id());
                        TaskRun {
                            seed,
                            task_id: task.task_id().to_string(),
                            samples: n_resolved,
                            metrics: None,
                            curve: Vec::new(),
                            error: Some(e.to_string()),
                        }
                    }
                });
            }
        }
        let ok: Vec<RunMetrics> = runs.iter().filter_map(|r| r.metrics.clone()).collect();
        let aggregate = if ok.is_empty() { None } else { Some(aggregate(&ok)?) };
        Ok(RunResult {
            config: mc.clone(),
            runs,
            aggregate,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            artifacts: Vec::new(),
        })
    }

    fn run_task(
        &mut self,
        mc: &MethodConfig,
        seed: u64,
        task_index: u64,
        task: &TaskDataset,
        n: usize,
    ) -> Result<(RunMetrics, Vec<f64>)> {
        // Same train ids for every method of a run, so that comparisons are paired.
        let ids = sample_train_ids(task, n, &mut stream(seed, 100 + task_index))?;
        let mut rng = stream(seed, 1000 + 16 * task_index + mc.method as u64);
        let cfg = self.config.clone();
        let (steps, cal) = (cfg.curve_steps, cfg.calibration);
        let supervised = TrainSpec {
            updates: mc.gradient_updates,
            ..cfg.vanilla
        };
        match mc.method {
            Method::VanillaLimit | Method::VanillaFull => {
                let out = baseline_vanilla(&self.learner, task, &ids, &supervised, steps, cal, &mut rng)?;
                Ok((metrics_of(&out.evaluation)?, out.curve))
            }
            Method::Transfer => {
                let pre = self.pretrained(seed)?;
                let out = fine_tune(&self.learner, &pre, task, &ids, &supervised, steps, cal, &mut rng)?;
                Ok((metrics_of(&out.evaluation)?, out.curve))
            }
            Method::Maml | Method::AgilePhase1 => {
                let theta = self.theta(mc.meta_task_source, seed)?;
                let horizon = steps.max(mc.gradient_updates);
                let out = adapt_and_eval(&self.learner, &theta, task, &ids, horizon, cfg.meta.inner_lr, cal, &mut rng)?;
                let metrics = metrics_of(&out.evaluations[mc.gradient_updates])?;
                Ok((metrics, out.curve[..=steps].to_vec()))
            }
            Method::AgilePhase2 => {
                let theta = self.theta(mc.meta_task_source, seed)?;
                let active = ActiveConfig {
                    budget: n,
                    inner_lr: cfg.meta.inner_lr,
                    inner_steps: mc.gradient_updates,
                    calibration: cal,
                    strategy: Strategy::Entropy,
                    ..cfg.active
                };
                let task_arc = Arc::new(task.clone());
                let active_seed = seed.wrapping_mul(1_000_003).wrapping_add(task_index);
                let result = active_loop(self.learner.clone(), &theta, task_arc, active, active_seed, &mut OracleLabeler, None)?;
                let LoopResult::Finished(outcome) = result else {
                    return Err(Error::Consistency("oracle labeler never defers".into()));
                };
                let labeled = outcome.pool.labeled_ids();
                let curve = adapt_and_eval(&self.learner, &theta, task, &labeled, steps, cfg.meta.inner_lr, cal, &mut rng)?.curve;
                Ok((metrics_of(&outcome.evaluation)?, curve))
            }
        }
    }

    /// One run of `method` per budget, sharing meta-trained parameters.
    pub fn sweep_training_size(&mut self, method: Method, sizes: &[Budget], seed: u64) -> Result<Vec<SweepRow>> {
        sizes
            .iter()
            .map(|&budget| {
                let mc = MethodConfig::table(method, seed).with_budget(budget);
                Ok(SweepRow {
                    method,
                    budget,
                    result: self.run_method(&mc)?,
                })
            })
            .collect()
    }
}

fn metrics_of(e: &crate::meta::Evaluation) -> Result<RunMetrics> {
    compute_metrics(&e.predictions, &e.labels)
}

fn source_name(s: MetaTaskSource) -> &'static str {
    match s {
        MetaTaskSource::None => "none",
        MetaTaskSource::Base => "base",
        MetaTaskSource::Augmented => "augmented",
    }
}
