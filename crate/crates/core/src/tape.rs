//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records each primitive applied during a forward pass together
//! with its output value. [`Tape::backward`] replays the record in reverse,
//! propagating adjoints from the supplied seeds and accumulating parameter
//! gradients additively. The model's graph depends on the sampled route, so
//! every example gets its own tape.

use crate::error::{Error, Result};
use crate::params::{GradBuffer, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Affine {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
    },
    Relu(NodeId),
    Tanh(NodeId),
    Add(Vec<NodeId>),
    Concat(Vec<NodeId>),
    Softmax(NodeId),
    LogSoftmaxPick {
        x: NodeId,
        labels: Vec<usize>,
    },
    Sum(Vec<NodeId>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A constant leaf. Gradients never flow into inputs.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn affine(
        &mut self,
        params: &ParamStore,
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
    ) -> Result<NodeId> {
        let out = tensor::affine_opt(self.value(x), params.value(w), b.map(|b| params.value(b)))?;
        Ok(self.push(out, Op::Affine { x, w, b }, true))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = tensor::relu(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v.tanh()).collect();
        let out = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Tanh(x), needs)
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn add(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Usage("add of zero operands".into()))?;
        let mut out = self.value(*first).clone();
        for &x in &xs[1..] {
            if self.value(x).shape() != out.shape() {
                return Err(Error::Config(format!(
                    "add shape mismatch {:?} vs {:?}",
                    out.shape(),
                    self.value(x).shape()
                )));
            }
            out.add_assign(self.value(x));
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(out, Op::Add(xs.to_vec()), needs))
    }

    /// Column-wise concatenation of `[rows, *]` nodes sharing `rows`.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let rows = xs
            .first()
            .map(|&x| self.value(x).rows())
            .ok_or_else(|| Error::Usage("concat of zero operands".into()))?;
        if xs.iter().any(|&x| self.value(x).rows() != rows) {
            return Err(Error::Config("concat row mismatch".into()));
        }
        let total: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row_slice(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(out, Op::Concat(xs.to_vec()), needs))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let out = tensor::softmax(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Softmax(x), needs)
    }

    /// Per-row log-softmax entry at `labels[row]`; output shape `[rows]`.
    pub fn log_softmax_pick(&mut self, x: NodeId, labels: &[usize]) -> Result<NodeId> {
        let out = tensor::log_likelihood(self.value(x), labels)?;
        let needs = self.needs(x);
        Ok(self.push(
            out,
            Op::LogSoftmaxPick {
                x,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Sum of every element of every operand; output shape `[1]`.
    pub fn sum(&mut self, xs: &[NodeId]) -> NodeId {
        let total = xs
            .iter()
            .map(|&x| self.value(x).data().iter().sum::<f64>())
            .sum();
        let needs = xs.iter().any(|&x| self.needs(x));
        self.push(Tensor::scalar(total), Op::Sum(xs.to_vec()), needs)
    }

    /// Reverse pass accumulating into the store's own gradients.
    pub fn backward(self, seeds: &[(NodeId, Tensor)], params: &mut ParamStore) -> Result<()> {
        let (values, grads) = (&params.values, &mut params.grads);
        self.backward_impl(seeds, values, grads)
    }

    /// Reverse pass accumulating into a separate buffer.
    pub fn backward_into(
        self,
        seeds: &[(NodeId, Tensor)],
        params: &ParamStore,
        buffer: &mut GradBuffer,
    ) -> Result<()> {
        self.backward_impl(seeds, &params.values, &mut buffer.0)
    }

    fn backward_impl(
        self,
        seeds: &[(NodeId, Tensor)],
        values: &[Tensor],
        param_grads: &mut [Tensor],
    ) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called on an empty tape".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, seed) in seeds {
            let node = self
                .nodes
                .get(id.0)
                .ok_or_else(|| Error::Usage(format!("seed node {} not on this tape", id.0)))?;
            if node.value.shape() != seed.shape() {
                return Err(Error::Usage(format!(
                    "seed shape {:?} does not match node shape {:?}",
                    seed.shape(),
                    node.value.shape()
                )));
            }
            accumulate(&mut grads, *id, seed.clone());
        }

        for index in (0..self.nodes.len()).rev() {
            let node = &self.nodes[index];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[index].take() else {
                continue;
            };
            match &node.op {
                Op::Input => {}
                Op::Affine { x, w, b } => {
                    let x_val = &self.nodes[x.0].value;
                    let n_out = node.value.cols();
                    let w_val = &values[w.0];
                    let mut dx = self.nodes[x.0]
                        .needs_grad
                        .then(|| Tensor::zeros(x_val.shape()));
                    for r in 0..x_val.rows() {
                        let delta = g.row_slice(r);
                        let x_row = x_val.row_slice(r);
                        let dw = param_grads[w.0].data_mut();
                        for (k, &xk) in x_row.iter().enumerate() {
                            if xk == 0.0 {
                                continue;
                            }
                            let dw_row = &mut dw[k * n_out..(k + 1) * n_out];
                            for (d, &dl) in dw_row.iter_mut().zip(delta) {
                                *d += xk * dl;
                            }
                        }
                        if let Some(b) = b {
                            for (d, &dl) in param_grads[b.0].data_mut().iter_mut().zip(delta) {
                                *d += dl;
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let cols = x_row.len();
                            let dx_row = &mut dx.data_mut()[r * cols..(r + 1) * cols];
                            for (k, d) in dx_row.iter_mut().enumerate() {
                                let w_row = &w_val.data()[k * n_out..(k + 1) * n_out];
                                *d = w_row.iter().zip(delta).map(|(a, b)| a * b).sum();
                            }
                        }
                    }
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Relu(x) => {
                    let mut dx = g;
                    for (d, &v) in dx.data_mut().iter_mut().zip(self.nodes[x.0].value.data()) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(xs) => {
                    for &x in xs {
                        if self.nodes[x.0].needs_grad {
                            accumulate(&mut grads, x, g.clone());
                        }
                    }
                }
                Op::Concat(xs) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for &x in xs {
                        let shape = self.nodes[x.0].value.shape().to_vec();
                        let cols = self.nodes[x.0].value.cols();
                        if self.nodes[x.0].needs_grad {
                            let mut part = Vec::with_capacity(rows * cols);
                            for r in 0..rows {
                                part.extend_from_slice(
                                    &g.data()[r * total + offset..r * total + offset + cols],
                                );
                            }
                            accumulate(&mut grads, x, Tensor::new(shape, part)?);
                        }
                        offset += cols;
                    }
                }
                Op::Softmax(x) => {
                    let k = node.value.cols();
                    let mut dx = g;
                    for r in 0..node.value.rows() {
                        let p = node.value.row_slice(r);
                        let row = &mut dx.data_mut()[r * k..(r + 1) * k];
                        let dot: f64 = row.iter().zip(p).map(|(a, b)| a * b).sum();
                        for (d, &pp) in row.iter_mut().zip(p) {
                            *d = pp * (*d - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LogSoftmaxPick { x, labels } => {
                    let logits = &self.nodes[x.0].value;
                    let p = tensor::softmax(logits);
                    let k = logits.cols();
                    let mut dx = Tensor::zeros(logits.shape());
                    for (r, &label) in labels.iter().enumerate() {
                        let seed = g.data()[r];
                        let row = &mut dx.data_mut()[r * k..(r + 1) * k];
                        for (j, d) in row.iter_mut().enumerate() {
                            let indicator = if j == label { 1.0 } else { 0.0 };
                            *d = seed * (indicator - p.row_slice(r)[j]);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sum(xs) => {
                    let s = g.data()[0];
                    for &x in xs {
                        if self.nodes[x.0].needs_grad {
                            let mut t = Tensor::zeros(self.nodes[x.0].value.shape());
                            t.fill(s);
                            accumulate(&mut grads, x, t);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
