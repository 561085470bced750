//! Binary classification tasks over multi-channel patches, the task
//! transforms used to grow the meta-task pool, episode sampling, a synthetic
//! task generator and the on-disk dataset format.
//!
//! A [`TaskDataset`] shares its patch storage with every task derived from
//! it. Transforms only edit a small view (label flip, channel permutation,
//! rotation), and patches are materialized on access.

mod augment;
mod episode;
mod io;
mod synthetic;

pub use augment::{
    augment_task, flip_labels, rotate_image, rotate_patches, shuffle_channels, AugmentationConfig, Permutation,
};
pub use episode::{sample_episode, Episode, EpisodeSpec};
pub use io::{export_task, load_dataset, load_task, MANIFEST_FILE, PATCH_FILE};
pub use synthetic::{generate_synthetic_task, SyntheticSpec, DEFAULT_CHANNEL_NAMES};

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::tensor::Tensor;

/// Fraction of each class placed in the train pool.
pub const TRAIN_FRACTION: f64 = 0.6;

/// Immutable patch storage shared between a task and its transforms.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchStore {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub channel_names: Vec<String>,
    /// `[Q, h, w, c]` row-major, values in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub labels: Vec<u8>,
}

impl PatchStore {
    pub fn new(
        (height, width, channels): (usize, usize, usize),
        channel_names: Vec<String>,
        pixels: Vec<f64>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        if channel_names.len() != channels {
            return Err(Error::Data(format!(
                "{} channel names for {channels} channels",
                channel_names.len()
            )));
        }
        if pixels.len() != labels.len() * height * width * channels {
            return Err(Error::Dimension {
                op: "patch_store",
                lhs: vec![labels.len(), height, width, channels],
                rhs: vec![pixels.len()],
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::Data(format!("label {bad} is not binary")));
        }
        Ok(PatchStore {
            height,
            width,
            channels,
            channel_names,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn patch_len(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// One task transform as recorded in a task's provenance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Transform {
    /// Every label `y` becomes `1 - y`.
    LabelFlip,
    ChannelShuffle(Permutation),
    /// Counterclockwise rotation by this many quarter turns.
    Rotation(u8),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub base_task: String,
    /// Transforms that fired, in application order.
    pub transforms: Vec<Transform>,
}

/// Which pool a sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Net effect of all transforms applied to a task.
#[derive(Clone, Debug, PartialEq, Eq)]
struct View {
    flip: bool,
    perm: Permutation,
    quarter_turns: u8,
}

/// A binary classification task with disjoint train and test pools.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    task_id: String,
    store: Arc<PatchStore>,
    view: View,
    train: Vec<usize>,
    test: Vec<usize>,
    provenance: Provenance,
}

impl TaskDataset {
    /// A task over `store` with explicit pools. Pools must partition all samples.
    pub fn new(task_id: impl Into<String>, store: PatchStore, train: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        let q = store.len();
        let mut seen = vec![false; q];
        for &i in train.iter().chain(&test) {
            if i >= q || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Data(format!("sample {i} is out of range or in both pools")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Data("train and test pools do not cover every sample".into()));
        }
        let task_id = task_id.into();
        let c = store.channels;
        Ok(TaskDataset {
            provenance: Provenance {
                base_task: task_id.clone(),
                transforms: Vec::new(),
            },
            task_id,
            view: View {
                flip: false,
                perm: Permutation::identity(c),
                quarter_turns: 0,
            },
            store: Arc::new(store),
            train,
            test,
        })
    }

    /// A task whose pools are a seeded stratified split with `TRAIN_FRACTION` of each class in train.
    pub fn with_stratified_split(task_id: impl Into<String>, store: PatchStore, rng: &mut dyn RngCore) -> Result<Self> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for class in 0..2u8 {
            let mut ids: Vec<usize> = (0..store.len()).filter(|&i| store.labels[i] == class).collect();
            ids.shuffle(rng);
            let n_train = (ids.len() as f64 * TRAIN_FRACTION).floor() as usize;
            train.extend_from_slice(&ids[..n_train]);
            test.extend_from_slice(&ids[n_train..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        TaskDataset::new(task_id, store, train, test)
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn with_task_id(mut self, task_id: impl Into<String>) -> Self {
        self.task_id = task_id.into();
        self
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    pub fn patch_shape(&self) -> (usize, usize, usize) {
        (self.store.height, self.store.width, self.store.channels)
    }

    pub fn channels(&self) -> usize {
        self.store.channels
    }

    /// Channel names in view order.
    pub fn channel_names(&self) -> Vec<String> {
        self.view
            .perm
            .map()
            .iter()
            .map(|&j| self.store.channel_names[j].clone())
            .collect()
    }

    pub fn train_pool(&self) -> &[usize] {
        &self.train
    }

    pub fn test_pool(&self) -> &[usize] {
        &self.test
    }

    pub fn split_of(&self, id: usize) -> Option<Split> {
        if self.train.contains(&id) {
            Some(Split::Train)
        } else if self.test.contains(&id) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn label(&self, id: usize) -> usize {
        usize::from(self.store.labels[id] ^ u8::from(self.view.flip))
    }

    pub fn labels(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&i| self.label(i)).collect()
    }

    /// Ids of `pool` with label `class`, in pool order.
    pub fn class_ids(&self, pool: &[usize], class: usize) -> Vec<usize> {
        pool.iter().copied().filter(|&i| self.label(i) == class).collect()
    }

    /// The transformed patch `[h, w, c]` of sample `id`.
    pub fn patch(&self, id: usize) -> Vec<f64> {
        let len = self.store.patch_len();
        let raw = &self.store.pixels[id * len..(id + 1) * len];
        let mut out = rotate_image(raw, self.store.height, self.store.channels, self.view.quarter_turns);
        if !self.view.perm.is_identity() {
            self.view.perm.apply_in_place(&mut out);
        }
        out
    }

    /// Patches `[n, h, w, c]` for `ids`.
    pub fn inputs(&self, ids: &[usize]) -> Result<Tensor> {
        let (h, w, c) = self.patch_shape();
        let mut data = Vec::with_capacity(ids.len() * h * w * c);
        for &i in ids {
            if i >= self.len() {
                return Err(Error::Usage(format!("sample {i} out of range for task {}", self.task_id)));
            }
            data.extend(self.patch(i));
        }
        Tensor::new(vec![ids.len(), h, w, c], data)
    }

    pub fn batch(&self, ids: &[usize]) -> Result<Batch> {
        Batch::new(self.inputs(ids)?, self.labels(ids))
    }

    /// Apply one transform to the view and log it.
    pub fn with_transform(&self, t: Transform) -> TaskDataset {
        let mut out = self.clone();
        match &t {
            Transform::LabelFlip => out.view.flip = !out.view.flip,
            Transform::ChannelShuffle(p) => {
                out.view.perm = self
                    .view
                    .perm
                    .then(p)
                    .expect("permutation length equals channel count")
            }
            Transform::Rotation(q) => out.view.quarter_turns = (out.view.quarter_turns + q) % 4,
        }
        out.provenance.transforms.push(t);
        out
    }

    /// Patch-for-patch and label-for-label equality, ignoring ids and provenance.
    pub fn same_content(&self, other: &TaskDataset) -> bool {
        self.len() == other.len()
            && self.patch_shape() == other.patch_shape()
            && self.train == other.train
            && self.test == other.test
            && (0..self.len()).all(|i| {
                self.label(i) == other.label(i)
                    && self
                        .patch(i)
                        .iter()
                        .zip(other.patch(i))
                        .all(|(a, b)| a.to_bits() == b.to_bits())
            })
    }

    /// A copy whose storage holds the materialized view, with an empty transform log.
    pub fn materialize(&self) -> TaskDataset {
        let len = self.store.patch_len();
        let mut pixels = Vec::with_capacity(self.len() * len);
        for i in 0..self.len() {
            pixels.extend(self.patch(i));
        }
        let labels = (0..self.len()).map(|i| self.label(i) as u8).collect();
        let (h, w, c) = self.patch_shape();
        let store = PatchStore {
            height: h,
            width: w,
            channels: c,
            channel_names: self.channel_names(),
            pixels,
            labels,
        };
        TaskDataset {
            task_id: self.task_id.clone(),
            view: View {
                flip: false,
                perm: Permutation::identity(c),
                quarter_turns: 0,
            },
            store: Arc::new(store),
            train: self.train.clone(),
            test: self.test.clone(),
            provenance: Provenance {
                base_task: self.provenance.base_task.clone(),
                transforms: Vec::new(),
            },
        }
    }
}

#[cfg(test)]
mod tests;
