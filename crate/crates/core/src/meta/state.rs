use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdamState, Learner, ParamSet};
use crate::tensor::{load_tensors, save_tensors};

const STATE_FILE: &str = "state.json";
const TENSOR_DIR: &str = "tensors";

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    /// 32-byte key, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position, decimal.
    pub word_pos: String,
}

impl RngSnapshot {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        RngSnapshot {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Data(format!("malformed rng snapshot {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Independent random streams used by meta-training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaRngs {
    /// Which base tasks enter each meta-batch.
    pub tasks: ChaCha8Rng,
    pub augment: ChaCha8Rng,
    pub episode: ChaCha8Rng,
    /// Dropout masks during meta-training forwards.
    pub dropout: ChaCha8Rng,
}

impl MetaRngs {
    pub fn from_seed(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        MetaRngs {
            tasks: stream(1),
            augment: stream(2),
            episode: stream(3),
            dropout: stream(4),
        }
    }
}

/// Everything needed to continue meta-training bit-exactly.
#[derive(Clone, Debug)]
pub struct MetaState {
    pub params: ParamSet,
    pub adam: AdamState,
    pub iteration: u64,
    pub rngs: MetaRngs,
}

#[derive(Serialize, Deserialize)]
struct StateManifest {
    iteration: u64,
    adam_step: u64,
    rng_tasks: RngSnapshot,
    rng_augment: RngSnapshot,
    rng_episode: RngSnapshot,
    rng_dropout: RngSnapshot,
    params_checksum: String,
}

impl MetaState {
    /// Fresh state: parameters drawn from stream 0 of `seed`, training streams 1–4.
    pub fn new<L: Learner + ?Sized>(learner: &L, seed: u64) -> Result<Self> {
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        Ok(MetaState {
            params: learner.init(&mut init)?,
            adam: AdamState::new(),
            iteration: 0,
            rngs: MetaRngs::from_seed(seed),
        })
    }

    /// Bit-level equality of parameters, optimizer moments, counter and rng positions.
    pub fn bit_eq(&self, other: &MetaState) -> bool {
        self.params.bit_eq(&other.params)
            && self.adam.bit_eq(&other.adam)
            && self.iteration == other.iteration
            && self.rngs == other.rngs
    }

    /// Write `dir/state.json` and `dir/tensors/` (parameters and Adam moments).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = self.params.to_named_tensors();
        tensors.extend(self.adam.to_named_tensors());
        save_tensors(&dir.join(TENSOR_DIR), &tensors)?;
        let manifest = StateManifest {
            iteration: self.iteration,
            adam_step: self.adam.step,
            rng_tasks: RngSnapshot::capture(&self.rngs.tasks),
            rng_augment: RngSnapshot::capture(&self.rngs.augment),
            rng_episode: RngSnapshot::capture(&self.rngs.episode),
            rng_dropout: RngSnapshot::capture(&self.rngs.dropout),
            params_checksum: format!("{:016x}", self.params.checksum()),
        };
        let path = dir.join(STATE_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Load a state saved by [`MetaState::save`]; `template` supplies names and shapes.
    pub fn load(dir: &Path, template: &ParamSet) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: StateManifest = serde_json::from_str(&text).map_err(|e| Error::ingestion(&path, e.to_string()))?;
        let tensors = load_tensors(&dir.join(TENSOR_DIR))?;
        let params = template.load_named_tensors(&tensors)?;
        if format!("{:016x}", params.checksum()) != m.params_checksum {
            return Err(Error::ingestion(&path, "parameter checksum mismatch"));
        }
        Ok(MetaState {
            params,
            adam: AdamState::from_named_tensors(m.adam_step, &tensors),
            iteration: m.iteration,
            rngs: MetaRngs {
                tasks: m.rng_tasks.restore()?,
                augment: m.rng_augment.restore()?,
                episode: m.rng_episode.restore()?,
                dropout: m.rng_dropout.restore()?,
            },
        })
    }
}
