use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{generate_synthetic_task, load_dataset, SyntheticSpec, TaskDataset};

/// Where the negatives of a synthetic task place their distractor blob.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistractorScope {
    /// Negatives are background only.
    None,
    /// The other signal channels of the same group (meta or real).
    Group,
    /// Every marker channel except the task's own signal.
    AllMarkers,
}

/// Meta and real tasks of one benchmark run.
///
/// Synthetic meta tasks mark their positives in one of `meta_signals`, real
/// tasks in one of `real_signals`. By default every task separates one marker
/// from all the others: negatives carry a blob in some other marker channel,
/// including the real ones. A learner that memorizes the meta tasks therefore
/// calls real positives negative. With a non-zero `nuisance_rate`, meta tasks
/// also carry label-independent blobs in the real signal channels.
/// Directories, when given, replace the synthetic tasks of that group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub patch_size: usize,
    pub channels: usize,
    pub meta_signals: Vec<usize>,
    pub real_signals: Vec<usize>,
    pub meta_distractors: DistractorScope,
    pub real_distractors: DistractorScope,
    pub nuisance_rate: f64,
    /// Synthetic real tasks per run; signals cycle through `real_signals`.
    pub real_tasks: usize,
    pub meta_samples: usize,
    pub real_samples: usize,
    pub amplitude: (f64, f64),
    pub noise_sigma: f64,
    pub meta_dir: Option<PathBuf>,
    pub real_dir: Option<PathBuf>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            patch_size: 32,
            channels: 7,
            meta_signals: vec![2, 3, 4],
            real_signals: vec![5, 6],
            meta_distractors: DistractorScope::AllMarkers,
            real_distractors: DistractorScope::AllMarkers,
            nuisance_rate: 0.0,
            real_tasks: 2,
            meta_samples: 400,
            real_samples: 1600,
            amplitude: (0.25, 1.0),
            noise_sigma: 0.06,
            meta_dir: None,
            real_dir: None,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.meta_signals.is_empty() || self.real_signals.is_empty() {
            return Err(Error::Parameter("meta and real signal channels must be non-empty".into()));
        }
        if self.meta_dir.is_none() {
            for &s in &self.meta_signals {
                self.spec(s, true, self.meta_samples).validate()?;
            }
        }
        if self.real_dir.is_none() {
            for &s in &self.real_signals {
                self.spec(s, false, self.real_samples).validate()?;
            }
        }
        Ok(())
    }

    /// Generator parameters of a task marked in `signal`.
    pub fn spec(&self, signal: usize, meta: bool, samples: usize) -> SyntheticSpec {
        let group = if meta { &self.meta_signals } else { &self.real_signals };
        let mut spec = SyntheticSpec {
            channels: self.channels,
            amplitude: self.amplitude,
            noise_sigma: self.noise_sigma,
            ..SyntheticSpec::marker(signal, self.patch_size, samples)
        };
        let scope = if meta { self.meta_distractors } else { self.real_distractors };
        spec.distractor_channels = match scope {
            DistractorScope::None => Vec::new(),
            DistractorScope::Group => group.iter().copied().filter(|&c| c != signal).collect(),
            DistractorScope::AllMarkers => (2..self.channels).filter(|&c| c != signal).collect(),
        };
        if meta && self.nuisance_rate > 0.0 {
            spec.nuisance_channels = self.real_signals.iter().copied().filter(|&c| c != signal).collect();
            spec.nuisance_rate = self.nuisance_rate;
        }
        spec
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub meta_tasks: Vec<TaskDataset>,
    pub real_tasks: Vec<TaskDataset>,
}

impl World {
    /// Generate (or load) the world of run seed `seed`.
    pub fn build(config: &WorldConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(10);
        let meta_tasks = match &config.meta_dir {
            Some(dir) => load_dataset(dir)?,
            None => config
                .meta_signals
                .iter()
                .map(|&s| generate_synthetic_task(format!("meta-m{s}"), &config.spec(s, true, config.meta_samples), &mut rng))
                .collect::<Result<_>>()?,
        };
        let real_tasks = match &config.real_dir {
            Some(dir) => load_dataset(dir)?,
            None => (0..config.real_tasks)
                .map(|i| {
                    let s = config.real_signals[i % config.real_signals.len()];
                    generate_synthetic_task(format!("real{i}-m{s}"), &config.spec(s, false, config.real_samples), &mut rng)
                })
                .collect::<Result<_>>()?,
        };
        if meta_tasks.is_empty() || real_tasks.is_empty() {
            return Err(Error::Data("a world needs at least one meta task and one real task".into()));
        }
        Ok(World { meta_tasks, real_tasks })
    }
}
