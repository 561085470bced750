use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{Param, ParamRole, ParamSet};
use super::{ForwardMode, ForwardOutput, Learner, RunningUpdate};
use crate::error::{Error, Result};
use crate::tensor::{Padding, Tape, Tensor, Var};

const PARAMS_PER_BLOCK: usize = 5;

/// Architecture of the convolutional patch classifier.
///
/// Each block is `conv(k×k, filters) → batchnorm → relu → dropout → maxpool(2)`;
/// a dense layer maps the flattened final feature map to `classes` logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// `(height, width, channels)` of one input patch.
    pub input_shape: (usize, usize, usize),
    pub blocks: usize,
    pub filters: usize,
    pub kernel_size: usize,
    pub classes: usize,
    /// Applied after every relu in train and MC modes.
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_shape: (32, 32, 7),
            blocks: 4,
            filters: 32,
            kernel_size: 3,
            classes: 2,
            dropout_rate: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn with_input(h: usize, w: usize, c: usize) -> Self {
        ModelConfig {
            input_shape: (h, w, c),
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Parameter(format!("empty input shape {:?}", self.input_shape)));
        }
        if self.classes != 2 {
            return Err(Error::Parameter(format!("binary classifier expects 2 classes, got {}", self.classes)));
        }
        if self.blocks == 0 || self.filters == 0 || self.kernel_size == 0 {
            return Err(Error::Parameter("blocks, filters and kernel size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Parameter(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        self.final_spatial().map(|_| ())
    }

    /// Spatial size after all pooling stages (floor division per stage).
    pub fn final_spatial(&self) -> Result<(usize, usize)> {
        let (mut h, mut w, _) = self.input_shape;
        for b in 0..self.blocks {
            if h < 2 || w < 2 {
                return Err(Error::Parameter(format!(
                    "input {:?} too small for {} pooling stages (block {b} sees {h}x{w})",
                    self.input_shape, self.blocks
                )));
            }
            h /= 2;
            w /= 2;
        }
        Ok((h, w))
    }

    /// Width of the flattened features fed to the dense layer.
    pub fn dense_inputs(&self) -> Result<usize> {
        let (h, w) = self.final_spatial()?;
        Ok(h * w * self.filters)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    config: ModelConfig,
}

impl Classifier {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (h, w, _) = config.input_shape;
        let divisor = 1usize << config.blocks.min(63);
        if h % divisor != 0 || w % divisor != 0 {
            log::warn!(
                "input {h}x{w} is not divisible by 2^{}; pooling floors odd sizes",
                config.blocks
            );
        }
        Ok(Classifier { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// The same architecture with a different dropout rate.
    pub fn with_dropout_rate(&self, rate: f64) -> Result<Self> {
        let mut config = self.config.clone();
        config.dropout_rate = rate;
        config.validate()?;
        Ok(Classifier { config })
    }

    pub fn build(&self, rng: &mut dyn RngCore) -> Result<ParamSet> {
        let c = &self.config;
        let mut params = Vec::with_capacity(c.blocks * PARAMS_PER_BLOCK + 2);
        let mut cin = c.input_shape.2;
        for b in 0..c.blocks {
            let fan_in = c.kernel_size * c.kernel_size * cin;
            params.push(Param {
                name: format!("block{b}.conv"),
                value: he_normal(&[c.kernel_size, c.kernel_size, cin, c.filters], fan_in, rng)?,
                trainable: true,
            });
            for (suffix, value, trainable) in [
                ("bn_gamma", 1.0, true),
                ("bn_beta", 0.0, true),
                ("bn_mean", 0.0, false),
                ("bn_var", 1.0, false),
            ] {
                params.push(Param {
                    name: format!("block{b}.{suffix}"),
                    value: Tensor::full(&[c.filters], value),
                    trainable,
                });
            }
            cin = c.filters;
        }
        let features = c.dense_inputs()?;
        params.push(Param {
            name: "dense.weight".into(),
            value: he_normal(&[features, c.classes], features, rng)?,
            trainable: true,
        });
        params.push(Param {
            name: "dense.bias".into(),
            value: Tensor::zeros(&[c.classes]),
            trainable: true,
        });
        ParamSet::new(ParamRole::Meta, params)
    }

    fn check_input(&self, inputs: &Tensor) -> Result<()> {
        let (h, w, c) = self.config.input_shape;
        match inputs.shape() {
            [n, ih, iw, ic] if *n > 0 && (*ih, *iw, *ic) == (h, w, c) => Ok(()),
            other => Err(Error::Dimension {
                op: "classifier_forward",
                lhs: other.to_vec(),
                rhs: vec![0, h, w, c],
            }),
        }
    }

    fn check_params(&self, params: &ParamSet, vars: &[Var]) -> Result<()> {
        let expected = self.config.blocks * PARAMS_PER_BLOCK + 2;
        if params.len() != expected || vars.len() != expected {
            return Err(Error::Consistency(format!(
                "classifier expects {expected} parameters, got {} ({} bound)",
                params.len(),
                vars.len()
            )));
        }
        Ok(())
    }

    /// conv → batchnorm → relu for block `b`.
    #[allow(clippy::too_many_arguments)]
    fn conv_bn_relu(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        vars: &[Var],
        x: Var,
        b: usize,
        mode: ForwardMode,
        running: &mut Vec<RunningUpdate>,
    ) -> Result<Var> {
        let base = b * PARAMS_PER_BLOCK;
        let h = tape.conv2d(x, vars[base], Padding::Same)?;
        let stats = match mode {
            ForwardMode::Train => None,
            ForwardMode::Eval | ForwardMode::Mc => {
                Some((&params.param(base + 3).value, &params.param(base + 4).value))
            }
        };
        let (h, batch) = tape.batchnorm(h, vars[base + 1], vars[base + 2], stats)?;
        if let Some(batch) = batch {
            let unbias = if batch.count > 1 {
                batch.count as f64 / (batch.count - 1) as f64
            } else {
                1.0
            };
            running.push(RunningUpdate {
                param_index: base + 3,
                batch_value: Tensor::vector(batch.mean),
            });
            running.push(RunningUpdate {
                param_index: base + 4,
                batch_value: Tensor::vector(batch.var.iter().map(|v| v * unbias).collect()),
            });
        }
        tape.relu(h)
    }

    fn dropout_pool(&self, tape: &mut Tape, x: Var, mode: ForwardMode, rng: &mut dyn RngCore) -> Result<Var> {
        let active = matches!(mode, ForwardMode::Train | ForwardMode::Mc);
        let x = tape.dropout(x, self.config.dropout_rate, active, rng)?;
        tape.maxpool2d(x, 2, 2)
    }

    /// Everything after the first block's relu.
    #[allow(clippy::too_many_arguments)]
    fn tail(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        vars: &[Var],
        mut x: Var,
        mode: ForwardMode,
        rng: &mut dyn RngCore,
        running: &mut Vec<RunningUpdate>,
    ) -> Result<Var> {
        x = self.dropout_pool(tape, x, mode, rng)?;
        for b in 1..self.config.blocks {
            x = self.conv_bn_relu(tape, params, vars, x, b, mode, running)?;
            x = self.dropout_pool(tape, x, mode, rng)?;
        }
        let n = tape.shape(x)[0];
        let features: usize = tape.shape(x)[1..].iter().product();
        let flat = tape.reshape(x, &[n, features])?;
        let dense = self.config.blocks * PARAMS_PER_BLOCK;
        let z = tape.matmul(flat, vars[dense])?;
        tape.add_row_bias(z, vars[dense + 1])
    }

    /// Per-pass class probabilities of `passes` Monte-Carlo dropout forwards.
    ///
    /// The first block's conv/batchnorm/relu does not depend on the dropout
    /// mask, so it is computed once per chunk and shared by all passes.
    fn shared_stem_mc(
        &self,
        params: &ParamSet,
        inputs: &Tensor,
        passes: usize,
        rng: &mut dyn RngCore,
        chunk: usize,
    ) -> Result<Vec<Tensor>> {
        self.check_input(inputs)?;
        let n = inputs.shape()[0];
        let chunk = chunk.max(1);
        let mut per_pass: Vec<Vec<f64>> = vec![Vec::with_capacity(n * 2); passes];
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let part = inputs.select_rows(&idx)?;
            let stem = {
                let mut tape = Tape::new();
                let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.value.clone())).collect();
                self.check_params(params, &vars)?;
                let x = tape.constant(part);
                let h = self.conv_bn_relu(&mut tape, params, &vars, x, 0, ForwardMode::Mc, &mut Vec::new())?;
                tape.value(h).clone()
            };
            for probs in per_pass.iter_mut() {
                let mut tape = Tape::new();
                let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.value.clone())).collect();
                let h = tape.constant(stem.clone());
                let logits = self.tail(&mut tape, params, &vars, h, ForwardMode::Mc, rng, &mut Vec::new())?;
                let p = tape.softmax(logits)?;
                probs.extend_from_slice(tape.value(p).data());
            }
        }
        per_pass
            .into_iter()
            .map(|d| Tensor::new(vec![n, self.config.classes], d))
            .collect()
    }
}

impl Learner for Classifier {
    fn init(&self, rng: &mut dyn RngCore) -> Result<ParamSet> {
        self.build(rng)
    }

    fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        vars: &[Var],
        inputs: &Tensor,
        mode: ForwardMode,
        rng: &mut dyn RngCore,
    ) -> Result<ForwardOutput> {
        self.check_input(inputs)?;
        self.check_params(params, vars)?;
        let mut running = Vec::new();
        let x = tape.constant(inputs.clone());
        let h = self.conv_bn_relu(tape, params, vars, x, 0, mode, &mut running)?;
        let logits = self.tail(tape, params, vars, h, mode, rng, &mut running)?;
        Ok(ForwardOutput { logits, running })
    }

    fn dropout_rate(&self) -> f64 {
        self.config.dropout_rate
    }

    fn mc_pass_probs(
        &self,
        params: &ParamSet,
        inputs: &Tensor,
        passes: usize,
        rng: &mut dyn RngCore,
        chunk: usize,
    ) -> Result<Vec<Tensor>> {
        self.shared_stem_mc(params, inputs, passes, rng, chunk)
    }
}

pub(crate) fn he_normal(shape: &[usize], fan_in: usize, rng: &mut dyn RngCore) -> Result<Tensor> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::Parameter(e.to_string()))?;
    let len = shape.iter().product();
    let data = (0..len).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data)
}
