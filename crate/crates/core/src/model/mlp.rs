use rand::RngCore;

use super::classifier::he_normal;
use super::params::{Param, ParamRole, ParamSet};
use super::{ForwardMode, ForwardOutput, Learner};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Fully connected relu network over flattened inputs.
///
/// Every op it records supports differentiable gradients, so it can be
/// meta-trained with exact second-order meta-gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    dropout_rate: f64,
}

impl Mlp {
    /// `sizes = [inputs, hidden.., classes]`.
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Parameter(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Mlp {
            sizes,
            dropout_rate: 0.0,
        })
    }

    pub fn with_dropout_rate(mut self, rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        self.dropout_rate = rate;
        Ok(self)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }
}

impl Learner for Mlp {
    fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    fn init(&self, rng: &mut dyn RngCore) -> Result<ParamSet> {
        let mut params = Vec::new();
        for (i, pair) in self.sizes.windows(2).enumerate() {
            params.push(Param {
                name: format!("layer{i}.weight"),
                value: he_normal(&[pair[0], pair[1]], pair[0], rng)?,
                trainable: true,
            });
            params.push(Param {
                name: format!("layer{i}.bias"),
                value: Tensor::zeros(&[pair[1]]),
                trainable: true,
            });
        }
        ParamSet::new(ParamRole::Meta, params)
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
        let layers = self.sizes.len() - 1;
        if params.len() != 2 * layers || vars.len() != 2 * layers {
            return Err(Error::Consistency(format!(
                "mlp expects {} parameters, got {}",
                2 * layers,
                params.len()
            )));
        }
        let n = inputs.shape().first().copied().unwrap_or(0);
        let features: usize = inputs.shape().iter().skip(1).product();
        if n == 0 || features != self.sizes[0] {
            return Err(Error::Dimension {
                op: "mlp_forward",
                lhs: inputs.shape().to_vec(),
                rhs: vec![0, self.sizes[0]],
            });
        }
        let x = tape.constant(inputs.clone());
        let mut h = tape.reshape(x, &[n, features])?;
        let active = matches!(mode, ForwardMode::Train | ForwardMode::Mc);
        for l in 0..layers {
            let z = tape.matmul(h, vars[2 * l])?;
            h = tape.add_row_bias(z, vars[2 * l + 1])?;
            if l + 1 < layers {
                h = tape.relu(h)?;
                h = tape.dropout(h, self.dropout_rate, active, rng)?;
            }
        }
        Ok(ForwardOutput {
            logits: h,
            running: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{loss_and_grads, Batch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_gradients() {
        let mlp = Mlp::new(vec![6, 5, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = mlp.init(&mut rng).unwrap();
        assert_eq!(params.trainable_count(), 6 * 5 + 5 + 5 * 2 + 2);
        let x = Tensor::new(vec![4, 2, 3], (0..24).map(|i| i as f64 / 24.0).collect()).unwrap();
        let batch = Batch::new(x, vec![0, 1, 1, 0]).unwrap();
        let (loss, grads, running) = loss_and_grads(&mlp, &params, &batch, ForwardMode::Train, &mut rng).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(grads.len(), 4);
        assert!(running.is_empty());
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(Mlp::new(vec![3]).is_err());
        assert!(Mlp::new(vec![3, 0, 2]).is_err());
        assert!(Mlp::new(vec![3, 2]).unwrap().with_dropout_rate(1.0).is_err());
    }
}
