use std::collections::BTreeMap;

use super::params::{ParamGrads, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{NamedTensor, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        let mut out = Vec::with_capacity(self.m.len() * 2);
        for (prefix, map) in [("adam_m", &self.m), ("adam_v", &self.v)] {
            for (name, t) in map {
                out.push(NamedTensor {
                    name: format!("{prefix}/{name}"),
                    tensor: t.clone(),
                });
            }
        }
        out
    }

    pub fn from_named_tensors(step: u64, tensors: &[NamedTensor]) -> Self {
        let mut state = AdamState {
            step,
            ..AdamState::default()
        };
        for nt in tensors {
            if let Some(name) = nt.name.strip_prefix("adam_m/") {
                state.m.insert(name.to_string(), nt.tensor.clone());
            } else if let Some(name) = nt.name.strip_prefix("adam_v/") {
                state.v.insert(name.to_string(), nt.tensor.clone());
            }
        }
        state
    }

    pub fn bit_eq(&self, other: &AdamState) -> bool {
        let maps_eq = |a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>| {
            a.len() == b.len() && a.iter().zip(b).all(|((ka, ta), (kb, tb))| ka == kb && ta.bit_eq(tb))
        };
        self.step == other.step && maps_eq(&self.m, &other.m) && maps_eq(&self.v, &other.v)
    }
}

/// One bias-corrected Adam update of the trainable parameters.
pub fn adam_step(
    state: &AdamState,
    params: &ParamSet,
    grads: &ParamGrads,
    lr: f64,
) -> Result<(AdamState, ParamSet)> {
    let mut next = state.clone();
    next.step += 1;
    let t = next.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let mut out = params.clone();
    for i in 0..out.len() {
        let p = out.param(i);
        if !p.trainable {
            continue;
        }
        let name = p.name.clone();
        let g = grads
            .get(&name)
            .ok_or_else(|| Error::Consistency(format!("no gradient for {name}")))?;
        if g.shape() != p.value.shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: p.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let m = next.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
        }
        let v = next.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
        }
        let mut value = p.value.clone();
        for ((w, mi), vi) in value.data_mut().iter_mut().zip(next.m[&name].data()).zip(next.v[&name].data()) {
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
        out.set(i, value)?;
    }
    Ok((next, out))
}
