use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{PatchStore, TaskDataset};
use crate::error::{Error, Result};

/// Names of the seven default channels: two nuclear stains present in every
/// patch, then five cell-type markers.
pub const DEFAULT_CHANNEL_NAMES: [&str; 7] = [
    "nucleus_a",
    "nucleus_b",
    "marker_2",
    "marker_3",
    "marker_4",
    "marker_5",
    "marker_6",
];

/// Parameters of a synthetic patch task.
///
/// Every patch carries a centered Gaussian blob in each nuclear channel.
/// Positives add a blob in `signal_channel`; negatives add one in a channel
/// drawn uniformly from `distractor_channels`. Each `nuisance_channels` entry
/// independently carries a blob with probability `nuisance_rate` in either
/// class, so it says nothing about the label. Blob amplitudes are uniform in
/// `amplitude`, centers jitter uniformly by up to `center_jitter` pixels,
/// Gaussian pixel noise of std `noise_sigma` is added and values are clamped
/// to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub size: usize,
    pub channels: usize,
    pub signal_channel: usize,
    pub distractor_channels: Vec<usize>,
    pub nuclear_channels: Vec<usize>,
    pub nuisance_channels: Vec<usize>,
    pub nuisance_rate: f64,
    /// Blob standard deviation in pixels.
    pub blob_sigma: f64,
    pub amplitude: (f64, f64),
    pub center_jitter: f64,
    pub noise_sigma: f64,
    pub background: f64,
    /// Number of samples, half of them positive.
    pub samples: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec::marker(2, 32, 1600)
    }
}

impl SyntheticSpec {
    /// Seven-channel task whose positives are marked in `signal_channel`;
    /// every other marker channel serves as a distractor.
    pub fn marker(signal_channel: usize, size: usize, samples: usize) -> Self {
        SyntheticSpec {
            size,
            channels: 7,
            signal_channel,
            distractor_channels: (2..7).filter(|&c| c != signal_channel).collect(),
            nuclear_channels: vec![0, 1],
            nuisance_channels: Vec::new(),
            nuisance_rate: 0.0,
            blob_sigma: size as f64 / 10.0,
            amplitude: (0.15, 0.9),
            center_jitter: size as f64 / 10.0,
            noise_sigma: 0.08,
            background: 0.05,
            samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.size == 0 || self.channels == 0 {
            return bad("patch size and channel count must be positive".into());
        }
        if self.signal_channel >= self.channels {
            return bad(format!("signal channel {} >= {} channels", self.signal_channel, self.channels));
        }
        for &c in self.distractor_channels.iter().chain(&self.nuclear_channels).chain(&self.nuisance_channels) {
            if c >= self.channels || c == self.signal_channel {
                return bad(format!("channel {c} cannot be a distractor, nuclear or nuisance channel"));
            }
        }
        if !(0.0..=1.0).contains(&self.nuisance_rate) {
            return bad(format!("nuisance rate {} outside [0, 1]", self.nuisance_rate));
        }
        if self.samples == 0 || !self.samples.is_multiple_of(2) {
            return bad(format!("sample count {} must be even and positive", self.samples));
        }
        if !(self.noise_sigma >= 0.0) || !(self.center_jitter >= 0.0) {
            return bad("noise and jitter must be non-negative".into());
        }
        if !(self.blob_sigma > 0.0) || 4.0 * self.blob_sigma + 2.0 * self.center_jitter > self.size as f64 {
            return bad(format!(
                "blob (sigma {}, jitter {}) does not fit a {}-pixel patch",
                self.blob_sigma, self.center_jitter, self.size
            ));
        }
        let (lo, hi) = self.amplitude;
        if !(0.0 <= lo && lo <= hi) {
            return bad(format!("invalid amplitude range ({lo}, {hi})"));
        }
        Ok(())
    }
}

fn add_blob(pixels: &mut [f64], spec: &SyntheticSpec, channel: usize, amplitude: f64, rng: &mut dyn RngCore) {
    let n = spec.size;
    let mid = (n as f64 - 1.0) / 2.0;
    let (ci, cj) = if spec.center_jitter > 0.0 {
        (
            mid + rng.random_range(-spec.center_jitter..=spec.center_jitter),
            mid + rng.random_range(-spec.center_jitter..=spec.center_jitter),
        )
    } else {
        (mid, mid)
    };
    let denom = 2.0 * spec.blob_sigma * spec.blob_sigma;
    for i in 0..n {
        for j in 0..n {
            let r2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
            pixels[(i * n + j) * spec.channels + channel] += amplitude * (-r2 / denom).exp();
        }
    }
}

/// Generate a balanced synthetic task with a stratified train/test split.
pub fn generate_synthetic_task(
    task_id: impl Into<String>,
    spec: &SyntheticSpec,
    rng: &mut dyn RngCore,
) -> Result<TaskDataset> {
    spec.validate()?;
    let (n, c) = (spec.size, spec.channels);
    let patch_len = n * n * c;
    let mut labels: Vec<u8> = (0..spec.samples).map(|i| u8::from(i < spec.samples / 2)).collect();
    labels.shuffle(rng);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Parameter(e.to_string()))?;
    let (lo, hi) = spec.amplitude;
    let mut pixels = vec![spec.background; spec.samples * patch_len];
    for (patch, &label) in pixels.chunks_exact_mut(patch_len).zip(&labels) {
        for &ch in &spec.nuclear_channels {
            let a = rng.random_range(0.6..=1.0);
            add_blob(patch, spec, ch, a, rng);
        }
        let a = rng.random_range(lo..=hi);
        if label == 1 {
            add_blob(patch, spec, spec.signal_channel, a, rng);
        } else if let Some(&ch) = spec.distractor_channels.choose(rng) {
            add_blob(patch, spec, ch, a, rng);
        }
        for &ch in &spec.nuisance_channels {
            if rng.random_bool(spec.nuisance_rate) {
                let a = rng.random_range(lo..=hi);
                add_blob(patch, spec, ch, a, rng);
            }
        }
        if spec.noise_sigma > 0.0 {
            for v in patch.iter_mut() {
                *v += noise.sample(rng);
            }
        }
        for v in patch.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    let names = if c == DEFAULT_CHANNEL_NAMES.len() {
        DEFAULT_CHANNEL_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..c).map(|i| format!("channel_{i}")).collect()
    };
    let store = PatchStore::new((n, n, c), names, pixels, labels)?;
    TaskDataset::with_stratified_split(task_id, store, rng)
}
