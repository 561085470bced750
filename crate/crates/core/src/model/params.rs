use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{GradientMap, NamedTensor, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamRole {
    /// Slow meta-parameters (θ).
    Meta,
    /// Fast task-specific parameters (φ).
    Adapted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Running statistics are carried along but never receive gradient updates.
    pub trainable: bool,
}

/// An ordered, named collection of parameter tensors.
///
/// Updates are out-of-place: every optimizer step returns a new set, so a
/// meta-parameter snapshot survives any number of inner adaptations.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    role: ParamRole,
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new(role: ParamRole, params: Vec<Param>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for p in &params {
            if !seen.insert(p.name.as_str()) {
                return Err(Error::Consistency(format!("duplicate parameter {}", p.name)));
            }
        }
        Ok(ParamSet { role, params })
    }

    pub fn role(&self) -> ParamRole {
        self.role
    }

    pub fn with_role(mut self, role: ParamRole) -> Self {
        self.role = role;
        self
    }

    /// A copy tagged as adapted parameters.
    pub fn to_adapted(&self) -> ParamSet {
        self.clone().with_role(ParamRole::Adapted)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn param(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Replace the value at `index`, keeping its shape.
    pub fn set(&mut self, index: usize, value: Tensor) -> Result<()> {
        let p = &mut self.params[index];
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "param_set",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Record every parameter on `tape`: trainable ones as leaves, the rest as constants.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Collect gradients for the trainable parameters bound as `vars`.
    /// Parameters the loss does not reach get zero gradients.
    pub fn collect_grads(&self, vars: &[Var], grads: &mut GradientMap) -> ParamGrads {
        let mut out = ParamGrads::default();
        for (p, &v) in self.params.iter().zip(vars) {
            if p.trainable {
                let g = grads.remove(v).unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                out.insert(p.name.clone(), g);
            }
        }
        out
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.trainable == b.trainable && a.value.bit_eq(&b.value))
    }

    /// FNV-1a hash over names and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in &self.params {
            feed(p.name.as_bytes());
            for v in p.value.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        self.params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                tensor: p.value.clone(),
            })
            .collect()
    }

    /// Overwrite values from a checkpoint. Names and shapes must match exactly.
    pub fn load_named_tensors(&self, tensors: &[NamedTensor]) -> Result<ParamSet> {
        let mut out = self.clone();
        for p in out.params.iter_mut() {
            let Some(nt) = tensors.iter().find(|t| t.name == p.name) else {
                return Err(Error::Consistency(format!("checkpoint lacks parameter {}", p.name)));
            };
            if nt.tensor.shape() != p.value.shape() {
                return Err(Error::Dimension {
                    op: "load_params",
                    lhs: p.value.shape().to_vec(),
                    rhs: nt.tensor.shape().to_vec(),
                });
            }
            p.value = nt.tensor.clone();
        }
        Ok(out)
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    grads: BTreeMap<String, Tensor>,
}

impl ParamGrads {
    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.grads.insert(name, grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    /// `self += scale * other`, entry by entry.
    pub fn add_scaled(&mut self, other: &ParamGrads, scale: f64) -> Result<()> {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(Error::Dimension {
                            op: "add_grads",
                            lhs: acc.shape().to_vec(),
                            rhs: g.shape().to_vec(),
                        });
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * b;
                    }
                }
                None => {
                    self.grads.insert(name.clone(), g.map(|v| v * scale));
                }
            }
        }
        Ok(())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Out-of-place gradient descent step on the trainable parameters.
pub fn sgd_step(params: &ParamSet, grads: &ParamGrads, lr: f64) -> Result<ParamSet> {
    let mut out = params.clone();
    for p in out.params.iter_mut().filter(|p| p.trainable) {
        let g = grads
            .get(&p.name)
            .ok_or_else(|| Error::Consistency(format!("no gradient for {}", p.name)))?;
        if g.shape() != p.value.shape() {
            return Err(Error::Dimension {
                op: "sgd_step",
                lhs: p.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        for (w, d) in p.value.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParamSet {
        ParamSet::new(
            ParamRole::Meta,
            vec![
                Param {
                    name: "theta".into(),
                    value: Tensor::scalar(v),
                    trainable: true,
                },
                Param {
                    name: "stat".into(),
                    value: Tensor::scalar(5.0),
                    trainable: false,
                },
            ],
        )
        .unwrap()
    }

    fn grad(v: f64) -> ParamGrads {
        let mut g = ParamGrads::default();
        g.insert("theta".into(), Tensor::scalar(v));
        g
    }

    #[test]
    fn sgd_examples() {
        let p = scalar_set(1.0);
        let q = sgd_step(&p, &grad(2.0), 0.01).unwrap();
        assert!((q.get("theta").unwrap().item().unwrap() - 0.98).abs() < 1e-15);
        assert_eq!(q.get("stat").unwrap().item().unwrap(), 5.0);
        assert_eq!(p.get("theta").unwrap().item().unwrap(), 1.0);
        let same = sgd_step(&p, &grad(2.0), 0.0).unwrap();
        assert!(same.bit_eq(&p));
    }

    #[test]
    fn sequential_steps_differ_from_one_summed_step_on_quadratic() {
        // L = θ², ∇ = 2θ. Two recomputed steps from θ=1 at lr 0.1: 1 → 0.8 → 0.64.
        // One step with the two gradients evaluated at θ=1 summed: 1 - 0.1·4 = 0.6.
        let lr = 0.1;
        let p0 = scalar_set(1.0);
        let g0 = 2.0 * p0.get("theta").unwrap().item().unwrap();
        let p1 = sgd_step(&p0, &grad(g0), lr).unwrap();
        let g1 = 2.0 * p1.get("theta").unwrap().item().unwrap();
        let p2 = sgd_step(&p1, &grad(g1), lr).unwrap();
        let summed = sgd_step(&p0, &grad(2.0 * g0), lr).unwrap();
        let two = p2.get("theta").unwrap().item().unwrap();
        let one = summed.get("theta").unwrap().item().unwrap();
        assert!((two - 0.64).abs() < 1e-12);
        assert!((one - 0.6).abs() < 1e-12);
        assert_ne!(two, one);
    }

    #[test]
    fn missing_gradient_is_a_consistency_error() {
        let p = scalar_set(1.0);
        let err = sgd_step(&p, &ParamGrads::default(), 0.1).unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
    }

    #[test]
    fn adapted_copy_does_not_alias() {
        let theta = scalar_set(1.0);
        let before = theta.checksum();
        let mut phi = theta.to_adapted();
        phi.set(0, Tensor::scalar(-3.0)).unwrap();
        assert_eq!(theta.checksum(), before);
        assert_eq!(phi.role(), ParamRole::Adapted);
        assert_ne!(phi.checksum(), before);
    }

    #[test]
    fn duplicate_names_rejected() {
        let p = Param {
            name: "a".into(),
            value: Tensor::scalar(0.0),
            trainable: true,
        };
        assert!(ParamSet::new(ParamRole::Meta, vec![p.clone(), p]).is_err());
    }
}
