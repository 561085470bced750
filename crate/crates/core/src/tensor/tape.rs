use std::collections::BTreeMap;

use rand::{Rng, RngCore};

use super::kernels::{self, ConvGeom, Padding, PoolGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Tensor times a one-element tensor.
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    SumRows(Var),
    BroadcastRows(Var),
    Relu(Var),
    Sum(Var),
    Expand(Var),
    Reshape(Var),
    Softmax(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::AddRowBias(..) => "add_row_bias",
            Op::SumRows(..) => "sum_rows",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::Relu(..) => "relu",
            Op::Sum(..) => "sum",
            Op::Expand(..) => "expand",
            Op::Reshape(..) => "reshape",
            Op::Softmax(..) => "softmax",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::BatchNorm { .. } => "batchnorm",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batchnorm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance, as used for normalization.
    pub var: Vec<f64>,
    /// Number of values per channel.
    pub count: usize,
}

/// Gradients of a scalar w.r.t. every `requires_grad` leaf it reaches.
#[derive(Clone, Debug, Default)]
pub struct GradientMap {
    grads: BTreeMap<Var, Tensor>,
}

impl GradientMap {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn remove(&mut self, var: Var) -> Option<Tensor> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor)> {
        self.grads.iter()
    }
}

/// Append-only record of a computation. Node indices are a topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() && inputs.iter().all(|v| self.value(*v).all_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension {
                op,
                lhs: self.shape(v).to_vec(),
                rhs: vec![],
            }),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    /// Multiply every element of `a` by the single value held in `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Dimension {
                op: "scale_by",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let factor = self.value(s).data()[0];
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::ScaleBy(a, s), &[a, s])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        super::gemm::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            0.0,
        );
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), &[a])
    }

    /// `x[N,F] + b[F]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, f) = self.matrix_dims("add_row_bias", x)?;
        if self.shape(b) != [f] {
            return Err(Error::Dimension {
                op: "add_row_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(f) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRowBias(x, b), &[x, b])
    }

    /// Column sums of a `[N,F]` matrix.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (_, f) = self.matrix_dims("sum_rows", x)?;
        let mut out = vec![0.0; f];
        for row in self.value(x).data().chunks_exact(f) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        self.push(Tensor::from_parts(vec![f], out), Op::SumRows(x), &[x])
    }

    /// Repeat a `[F]` vector into `rows` rows.
    pub fn broadcast_rows(&mut self, b: Var, rows: usize) -> Result<Var> {
        let &[f] = self.shape(b) else {
            return Err(Error::Dimension {
                op: "broadcast_rows",
                lhs: self.shape(b).to_vec(),
                rhs: vec![rows],
            });
        };
        let src = self.value(b).data();
        let mut out = Vec::with_capacity(rows * f);
        for _ in 0..rows {
            out.extend_from_slice(src);
        }
        self.push(Tensor::from_parts(vec![rows, f], out), Op::BroadcastRows(b), &[b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Broadcast a one-element tensor to `shape`.
    pub fn expand(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Dimension {
                op: "expand",
                lhs: self.shape(s).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::full(shape, self.value(s).data()[0]);
        self.push(out, Op::Expand(s), &[s])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Row-wise softmax of a `[N,C]` matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("softmax", x)?;
        let out = kernels::softmax_rows(self.value(x).data(), c);
        self.push(Tensor::from_parts(vec![r, c], out), Op::Softmax(x), &[x])
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims("softmax_cross_entropy", logits)?;
        if n != labels.len() {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: vec![n, c],
                rhs: vec![labels.len()],
            });
        }
        if n == 0 {
            return Err(Error::Data("cross-entropy over an empty batch".into()));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Data(format!("label {bad} outside 0..{c}")));
        }
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits).data(), c, labels);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, padding: Padding) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), padding)?;
        let out = kernels::conv2d_forward(&geom, self.value(input).data(), self.value(kernel).data());
        self.push(
            Tensor::from_parts(geom.out_shape(), out),
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
            &[input, kernel],
        )
    }

    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let geom = PoolGeom::new(self.shape(input), window, stride)?;
        let (out, argmax) = kernels::maxpool_forward(&geom, self.value(input).data());
        self.push(
            Tensor::from_parts(geom.out_shape(), out),
            Op::MaxPool { input, argmax },
            &[input],
        )
    }

    /// Batch normalization over the last axis.
    ///
    /// With `running == None` the batch statistics are used (training mode) and
    /// returned; otherwise the supplied `(mean, var)` are treated as constants.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&Tensor, &Tensor)>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let channels = *self.shape(input).last().unwrap_or(&0);
        for p in [gamma, beta] {
            if self.shape(p) != [channels] {
                return Err(Error::Dimension {
                    op: "batchnorm",
                    lhs: self.shape(input).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if let Some((m, v)) = running {
            if m.shape() != [channels] || v.shape() != [channels] {
                return Err(Error::Dimension {
                    op: "batchnorm",
                    lhs: self.shape(input).to_vec(),
                    rhs: m.shape().to_vec(),
                });
            }
        }
        if channels == 0 || self.value(input).is_empty() {
            return Err(Error::Usage("batchnorm over an empty batch".into()));
        }
        let fwd = kernels::batchnorm_forward(
            self.value(input).data(),
            channels,
            self.value(gamma).data(),
            self.value(beta).data(),
            running.map(|(m, v)| (m.data(), v.data())),
        );
        let count = self.value(input).len() / channels;
        let stats = running.is_none().then(|| BatchStats {
            mean: fwd.mean.clone(),
            var: fwd.var.clone(),
            count,
        });
        let shape = self.shape(input).to_vec();
        let var = self.push(
            Tensor::from_parts(shape, fwd.y),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                batch_stats: running.is_none(),
            },
            &[input, gamma, beta],
        )?;
        Ok((var, stats))
    }

    /// Inverted dropout. Inactive or zero-rate dropout returns `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f64, active: bool, rng: &mut dyn RngCore) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !active || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = self.constant(Tensor::from_parts(self.shape(x).to_vec(), mask));
        self.mul(x, mask)
    }

    fn check_scalar_loss(&self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        Ok(())
    }

    /// Reverse-mode gradients of `loss` for every reachable `requires_grad` leaf.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        self.check_scalar_loss(loss)?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = GradientMap::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.grads
                    .insert(Var(i), Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            for (input, gi) in self.vjp(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(gi),
                }
            }
        }
        Ok(out)
    }

    fn vjp(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let need = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => vec![
                (*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect()),
                (*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect()),
            ],
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::ScaleBy(a, s) => {
                let sv = val(*s)[0];
                let ds: f64 = g.iter().zip(val(*a)).map(|(x, y)| x * y).sum();
                vec![(*a, g.iter().map(|x| x * sv).collect()), (*s, vec![ds])]
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut res = Vec::new();
                if need(*a) {
                    let mut ga = vec![0.0; m * k];
                    super::gemm::gemm(m, n, k, g, false, val(*b), true, &mut ga, 0.0);
                    res.push((*a, ga));
                }
                if need(*b) {
                    let mut gb = vec![0.0; k * n];
                    super::gemm::gemm(k, m, n, val(*a), true, g, false, &mut gb, 0.0);
                    res.push((*b, gb));
                }
                res
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                vec![(*a, ga)]
            }
            Op::AddRowBias(x, b) => {
                let f = self.shape(*b)[0];
                let mut gb = vec![0.0; f];
                for row in g.chunks_exact(f) {
                    gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::SumRows(x) => {
                let rows = self.shape(*x)[0];
                vec![(*x, g.repeat(rows))]
            }
            Op::BroadcastRows(b) => {
                let f = self.shape(*b)[0];
                let mut gb = vec![0.0; f];
                for row in g.chunks_exact(f) {
                    gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                vec![(*b, gb)]
            }
            Op::Relu(x) => vec![(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect(),
            )],
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::Expand(s) => vec![(*s, vec![g.iter().sum()])],
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Softmax(x) => {
                let c = self.shape(*x)[1];
                let s = node.value.data();
                let mut gx = vec![0.0; g.len()];
                for ((gr, sr), out) in g.chunks_exact(c).zip(s.chunks_exact(c)).zip(gx.chunks_exact_mut(c)) {
                    let dot: f64 = gr.iter().zip(sr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[j] = sr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                let mut gl = probs.clone();
                for (row, &y) in gl.chunks_exact_mut(c).zip(labels) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![(*logits, gl)]
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let (dx, dk) =
                    kernels::conv2d_backward(geom, val(*input), val(*kernel), g, need(*input), need(*kernel));
                let mut res = Vec::new();
                if let Some(dx) = dx {
                    res.push((*input, dx));
                }
                if let Some(dk) = dk {
                    res.push((*kernel, dk));
                }
                res
            }
            Op::MaxPool { input, argmax } => {
                let mut gx = vec![0.0; self.value(*input).len()];
                for (gv, &src) in g.iter().zip(argmax) {
                    gx[src] += gv;
                }
                vec![(*input, gx)]
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (dx, dgamma, dbeta) =
                    kernels::batchnorm_backward(g, xhat, inv_std, val(*gamma), *batch_stats);
                vec![(*input, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
        }
    }

    /// Gradients of `loss` w.r.t. `wrt`, recorded as new differentiable nodes
    /// so that they can themselves be differentiated. `wrt` may contain
    /// derived nodes as well as leaves.
    ///
    /// Only the dense-network op subset supports this; convolution, pooling,
    /// batchnorm and standalone softmax report [`Error::UnsupportedSecondOrder`].
    pub fn grad_graph(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        self.check_scalar_loss(loss)?;
        let mut grads: Vec<Option<Var>> = vec![None; loss.0 + 1];
        let seed = self.constant(Tensor::full(self.shape(loss), 1.0));
        grads[loss.0] = Some(seed);
        let mut found: BTreeMap<Var, Var> = BTreeMap::new();
        let lowest = wrt.iter().map(|v| v.0).min().unwrap_or(loss.0 + 1);
        for i in (lowest..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if wrt.contains(&Var(i)) {
                found.insert(Var(i), g);
            }
            if let Op::Leaf = self.nodes[i].op {
                continue;
            }
            for (input, gi) in self.vjp_graph(i, g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                grads[input.0] = Some(match grads[input.0] {
                    Some(acc) => self.add(acc, gi)?,
                    None => gi,
                });
            }
        }
        wrt.iter()
            .map(|v| match found.get(v) {
                Some(&g) => Ok(g),
                None => Ok(self.constant(Tensor::zeros(self.shape(*v)))),
            })
            .collect()
    }

    fn vjp_graph(&mut self, i: usize, g: Var) -> Result<Vec<(Var, Var)>> {
        let op = self.nodes[i].op.clone();
        Ok(match op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => vec![(a, g), (b, self.scale(g, -1.0)?)],
            Op::Mul(a, b) => vec![(a, self.mul(g, b)?), (b, self.mul(g, a)?)],
            Op::Scale(a, c) => vec![(a, self.scale(g, c)?)],
            Op::ScaleBy(a, s) => {
                let ga = self.scale_by(g, s)?;
                let prod = self.mul(g, a)?;
                let mut gs = self.sum(prod)?;
                if self.shape(gs) != self.shape(s) {
                    let shape = self.shape(s).to_vec();
                    gs = self.reshape(gs, &shape)?;
                }
                vec![(a, ga), (s, gs)]
            }
            Op::MatMul(a, b) => {
                let bt = self.transpose(b)?;
                let ga = self.matmul(g, bt)?;
                let at = self.transpose(a)?;
                let gb = self.matmul(at, g)?;
                vec![(a, ga), (b, gb)]
            }
            Op::Transpose(a) => vec![(a, self.transpose(g)?)],
            Op::AddRowBias(x, b) => vec![(x, g), (b, self.sum_rows(g)?)],
            Op::SumRows(x) => {
                let rows = self.shape(x)[0];
                vec![(x, self.broadcast_rows(g, rows)?)]
            }
            Op::BroadcastRows(b) => vec![(b, self.sum_rows(g)?)],
            Op::Relu(x) => {
                let mask = self.value(x).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                vec![(x, self.mul(g, mask)?)]
            }
            Op::Sum(x) => {
                let shape = self.shape(x).to_vec();
                vec![(x, self.expand(g, &shape)?)]
            }
            Op::Expand(s) => {
                let mut gs = self.sum(g)?;
                if self.shape(gs) != self.shape(s) {
                    let shape = self.shape(s).to_vec();
                    gs = self.reshape(gs, &shape)?;
                }
                vec![(s, gs)]
            }
            Op::Reshape(x) => {
                let shape = self.shape(x).to_vec();
                vec![(x, self.reshape(g, &shape)?)]
            }
            Op::SoftmaxCe { logits, labels, .. } => {
                let (n, c) = (self.shape(logits)[0], self.shape(logits)[1]);
                let mut onehot = vec![0.0; n * c];
                for (row, &y) in labels.iter().enumerate() {
                    onehot[row * c + y] = 1.0;
                }
                let onehot = self.constant(Tensor::from_parts(vec![n, c], onehot));
                let probs = self.softmax(logits)?;
                let diff = self.sub(probs, onehot)?;
                let diff = self.scale(diff, 1.0 / n as f64)?;
                vec![(logits, self.scale_by(diff, g)?)]
            }
            other @ (Op::Softmax(_) | Op::Conv2d { .. } | Op::MaxPool { .. } | Op::BatchNorm { .. }) => {
                return Err(Error::UnsupportedSecondOrder { op: other.name() });
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_one_by_one() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 1], &[5.0]));
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, k, Padding::Same).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv_valid_sum_of_products() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 2, 1]));
        let k = tape.constant(Tensor::ones(&[2, 2, 1, 1]));
        let y = tape.conv2d(x, k, Padding::Valid).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[4.0]);
    }

    #[test]
    fn conv_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 4, 4, 3]));
        let k = tape.constant(Tensor::ones(&[3, 3, 2, 8]));
        match tape.conv2d(x, k, Padding::Same) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![1, 4, 4, 3]);
                assert_eq!(rhs, vec![3, 3, 2, 8]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn maxpool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2, 1], &[1., 2., 3., 4.]));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let ramp: Vec<f64> = (0..16).map(f64::from).collect();
        let x = tape.constant(t(&[1, 4, 4, 1], &ramp));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[5., 7., 13., 15.]);
    }

    #[test]
    fn maxpool_tie_routes_gradient_to_first_element() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 2, 1], 3.0));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0]);
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_tiny_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 4, 1]));
        assert!(tape.maxpool2d(x, 2, 2).is_err());
    }

    #[test]
    fn batchnorm_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 1], &[-1.0, 1.0]));
        let gamma = tape.constant(Tensor::ones(&[1]));
        let beta = tape.constant(Tensor::zeros(&[1]));
        let (y, stats) = tape.batchnorm(x, gamma, beta, None).unwrap();
        let expected = 1.0 / (1.0 + kernels::BN_EPS).sqrt();
        assert!((tape.value(y).data()[0] + expected).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - expected).abs() < 1e-15);
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![0.0]);
        assert_eq!(stats.var, vec![1.0]);

        let zero_gamma = tape.constant(Tensor::zeros(&[1]));
        let beta = tape.constant(Tensor::full(&[1], 0.25));
        let (y, _) = tape.batchnorm(x, zero_gamma, beta, None).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, 0.25]);

        let rm = Tensor::zeros(&[1]);
        let rv = Tensor::ones(&[1]);
        let beta0 = tape.constant(Tensor::zeros(&[1]));
        let (y, stats) = tape.batchnorm(x, gamma, beta0, Some((&rm, &rv))).unwrap();
        assert!(stats.is_none());
        for (a, b) in tape.value(y).data().iter().zip([-1.0, 1.0]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_single_sample_is_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 3], &[2.0, -4.0, 7.0]));
        let gamma = tape.leaf(Tensor::ones(&[3]));
        let beta = tape.leaf(Tensor::zeros(&[3]));
        let (y, _) = tape.batchnorm(x, gamma, beta, None).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().all_finite());
    }

    #[test]
    fn relu_and_dense_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-2.0, 0.0, 3.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 3.0]);

        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero = tape.constant(Tensor::zeros(&[2]));
        let xw = tape.matmul(x, w).unwrap();
        let same = tape.add_row_bias(xw, zero).unwrap();
        assert_eq!(tape.value(same).data(), &[1.0, 2.0]);
        let ones = tape.constant(Tensor::ones(&[2]));
        let y = tape.add_row_bias(xw, ones).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0]);
    }

    #[test]
    fn dropout_identities_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[1., 2., 3., 4.]));
        assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.7, false, &mut rng).unwrap(), x);
        assert!(matches!(tape.dropout(x, 1.0, true, &mut rng), Err(Error::Parameter(_))));
        assert!(matches!(tape.dropout(x, -0.1, true, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[100_000]));
        let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        let vals = tape.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
        assert!((tape.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-12);

        let z = tape.constant(t(&[1, 2], &[30.0, -30.0]));
        let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
        let v = tape.value(l).item().unwrap();
        assert!(v.is_finite() && v.abs() < 1e-20);

        let z = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let l = tape.softmax_cross_entropy(z, &[1]).unwrap();
        let expected = (1.0 + 1f64.exp()).ln();
        assert!((tape.value(l).item().unwrap() - expected).abs() < 1e-12);
        assert!((expected - 1.3133).abs() < 1e-4);

        assert!(matches!(tape.softmax_cross_entropy(z, &[2]), Err(Error::Data(_))));
    }

    #[test]
    fn cross_entropy_finite_for_large_logits() {
        let mut tape = Tape::new();
        for mag in [1e2, 5e2, 1e3] {
            let z = tape.leaf(t(&[2, 2], &[mag, -mag, -mag, mag]));
            let l = tape.softmax_cross_entropy(z, &[1, 0]).unwrap();
            assert!(tape.value(l).item().unwrap().is_finite());
            assert!(tape.backward(l).unwrap().get(z).unwrap().all_finite());
        }
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let theta = tape.leaf(Tensor::scalar(3.0));
        let sq = tape.mul(theta, theta).unwrap();
        let grads = tape.backward(sq).unwrap();
        assert_eq!(grads.get(theta).unwrap().data(), &[6.0]);

        let mut tape = Tape::new();
        let theta = tape.leaf(Tensor::vector(vec![-1.0, 2.0]));
        let r = tape.relu(theta).unwrap();
        let s = tape.sum(r).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(theta).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let a = tape.scale(x, 3.0).unwrap();
        let b = tape.mul(x, x).unwrap();
        let s = tape.add(a, b).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn nan_output_from_finite_input_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1e200));
        let err = tape.mul(x, x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "mul" }));
    }

    #[test]
    fn second_order_of_cubic() {
        // d/dx (d/dx x^3) = 6x
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let sq = tape.mul(x, x).unwrap();
        let cube = tape.mul(sq, x).unwrap();
        let g = tape.grad_graph(cube, &[x]).unwrap()[0];
        assert!((tape.value(g).item().unwrap() - 3.0 * 1.5 * 1.5).abs() < 1e-12);
        let gg = tape.backward(g).unwrap();
        assert!((gg.get(x).unwrap().item().unwrap() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn second_order_rejects_conv() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 2, 1]));
        let k = tape.leaf(Tensor::ones(&[1, 1, 1, 1]));
        let y = tape.conv2d(x, k, Padding::Same).unwrap();
        let s = tape.sum(y).unwrap();
        assert!(matches!(
            tape.grad_graph(s, &[k]),
            Err(Error::UnsupportedSecondOrder { op: "conv2d" })
        ));
    }
}
