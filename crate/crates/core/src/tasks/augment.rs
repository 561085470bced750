use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{TaskDataset, Transform};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A bijection on channel indices: output channel `i` takes input channel `map[i]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &j in &map {
            if j >= map.len() || std::mem::replace(&mut seen[j], true) {
                return Err(Error::Parameter(format!("{map:?} is not a permutation")));
            }
        }
        Ok(Permutation { map })
    }

    pub fn identity(c: usize) -> Self {
        Permutation { map: (0..c).collect() }
    }

    /// Uniformly random permutation of `c` channels.
    pub fn random(c: usize, rng: &mut dyn RngCore) -> Self {
        let mut map: Vec<usize> = (0..c).collect();
        map.shuffle(rng);
        Permutation { map }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &j)| i == j)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.map.len()];
        for (i, &j) in self.map.iter().enumerate() {
            inv[j] = i;
        }
        Permutation { map: inv }
    }

    /// The permutation that applies `self` first and `then` second.
    pub fn then(&self, then: &Permutation) -> Result<Permutation> {
        if self.len() != then.len() {
            return Err(Error::Dimension {
                op: "permutation_compose",
                lhs: vec![self.len()],
                rhs: vec![then.len()],
            });
        }
        Ok(Permutation {
            map: then.map.iter().map(|&k| self.map[k]).collect(),
        })
    }

    /// Permute the channels of channel-last data in place.
    pub fn apply_in_place(&self, data: &mut [f64]) {
        let c = self.map.len();
        let mut pixel = vec![0.0; c];
        for px in data.chunks_exact_mut(c) {
            pixel.copy_from_slice(px);
            for (o, &j) in px.iter_mut().zip(&self.map) {
                *o = pixel[j];
            }
        }
    }

    /// The equivalent `1×1×c×c` one-hot convolution kernel.
    pub fn to_conv_kernel(&self) -> Tensor {
        let c = self.map.len();
        let mut k = Tensor::zeros(&[1, 1, c, c]);
        for (i, &j) in self.map.iter().enumerate() {
            k.data_mut()[j * c + i] = 1.0;
        }
        k
    }
}

/// Rotate a square channel-last image counterclockwise by `quarter_turns × 90°`.
pub fn rotate_image(data: &[f64], size: usize, c: usize, quarter_turns: u8) -> Vec<f64> {
    let n = size;
    let q = quarter_turns % 4;
    if q == 0 {
        return data.to_vec();
    }
    let mut out = vec![0.0; data.len()];
    for i in 0..n {
        for j in 0..n {
            let (si, sj) = match q {
                1 => (j, n - 1 - i),
                2 => (n - 1 - i, n - 1 - j),
                _ => (n - 1 - j, i),
            };
            let src = (si * n + sj) * c;
            let dst = (i * n + j) * c;
            out[dst..dst + c].copy_from_slice(&data[src..src + c]);
        }
    }
    out
}

/// Firing probabilities of the three task transforms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub p_flip: f64,
    pub p_shuffle: f64,
    pub p_rotate: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig::equal(0.5)
    }
}

impl AugmentationConfig {
    pub fn equal(p: f64) -> Self {
        AugmentationConfig {
            p_flip: p,
            p_shuffle: p,
            p_rotate: p,
        }
    }

    pub fn none() -> Self {
        AugmentationConfig::equal(0.0)
    }

    pub fn is_disabled(&self) -> bool {
        self.p_flip == 0.0 && self.p_shuffle == 0.0 && self.p_rotate == 0.0
    }

    pub fn is_equal(&self) -> bool {
        self.p_flip == self.p_shuffle && self.p_shuffle == self.p_rotate
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_flip", self.p_flip), ("p_shuffle", self.p_shuffle), ("p_rotate", self.p_rotate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parameter(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn fires(rng: &mut dyn RngCore, p: f64) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

/// Flip every label of the task with probability `p`.
pub fn flip_labels(task: &TaskDataset, rng: &mut dyn RngCore, p: f64) -> TaskDataset {
    if fires(rng, p) {
        task.with_transform(Transform::LabelFlip)
    } else {
        task.clone()
    }
}

/// With probability `p`, permute the channels of every patch by a uniform random permutation.
pub fn shuffle_channels(task: &TaskDataset, rng: &mut dyn RngCore, p: f64) -> Result<TaskDataset> {
    let c = task.channels();
    if c < 2 {
        return Err(Error::Parameter(format!("channel shuffle needs at least 2 channels, task has {c}")));
    }
    if fires(rng, p) {
        let perm = Permutation::random(c, rng);
        Ok(task.with_transform(Transform::ChannelShuffle(perm)))
    } else {
        Ok(task.clone())
    }
}

/// With probability `p`, rotate every patch counterclockwise by 90°, 180° or 270°.
pub fn rotate_patches(task: &TaskDataset, rng: &mut dyn RngCore, p: f64) -> Result<TaskDataset> {
    let (h, w, _) = task.patch_shape();
    if h != w {
        return Err(Error::Dimension {
            op: "rotate_patches",
            lhs: vec![h, w],
            rhs: vec![h, h],
        });
    }
    if fires(rng, p) {
        let q = rng.random_range(1..=3u8);
        Ok(task.with_transform(Transform::Rotation(q)))
    } else {
        Ok(task.clone())
    }
}

/// Flip, then shuffle, then rotate, each with an independent draw.
pub fn augment_task(task: &TaskDataset, config: &AugmentationConfig, rng: &mut dyn RngCore) -> Result<TaskDataset> {
    config.validate()?;
    let t = flip_labels(task, rng, config.p_flip);
    let t = shuffle_channels(&t, rng, config.p_shuffle)?;
    rotate_patches(&t, rng, config.p_rotate)
}
