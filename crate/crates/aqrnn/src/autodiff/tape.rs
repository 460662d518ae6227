//! Reverse-mode Wengert tape.
//!
//! A computation is recorded as an ordered list of nodes; each op node stores
//! its kind, parent indices, and forward value. `backward` sweeps the list in
//! reverse and accumulates gradients. Leaves that no path connects to the
//! loss keep a `None` gradient slot, which readers observe as exact zeros —
//! this is what makes restricted (top-K) team updates verifiable.

use super::tensor::{self, Tensor};
use crate::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Primitive operations the tape records.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Matmul,
    Add,
    Hadamard,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Sum,
    Mean,
    Sigmoid,
    Tanh,
    LeakyRelu { slope: f64 },
    Softplus,
    Scale { factor: f64 },
    Reshape { shape: Vec<usize> },
}

enum NodeKind {
    /// Differentiable input (parameter).
    Leaf,
    /// Non-differentiable input (data).
    Constant,
    Op { kind: OpKind, parents: Vec<Var> },
}

struct Node {
    kind: NodeKind,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<Var>,
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

    /// Registers a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let v = self.push(NodeKind::Leaf, value);
        self.leaves.push(v);
        v
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(NodeKind::Constant, value)
    }

    /// Leaves in registration order.
    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, kind: NodeKind, value: Tensor) -> Var {
        self.nodes.push(Node { kind, value });
        Var(self.nodes.len() - 1)
    }

    /// Applies one primitive, validating arity and shapes, and records the
    /// result as a new node.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity_err = |op: &'static str, want: usize| Error::Shape {
            op,
            detail: format!("expected {} inputs, got {}", want, inputs.len()),
        };
        let value = match &kind {
            OpKind::Matmul => {
                if inputs.len() != 2 {
                    return Err(arity_err("matmul", 2));
                }
                tensor::matmul(self.value(inputs[0]), self.value(inputs[1]))?
            }
            OpKind::Add => {
                if inputs.len() != 2 {
                    return Err(arity_err("add", 2));
                }
                tensor::add(self.value(inputs[0]), self.value(inputs[1]))?
            }
            OpKind::Hadamard => {
                if inputs.len() != 2 {
                    return Err(arity_err("hadamard", 2));
                }
                tensor::hadamard(self.value(inputs[0]), self.value(inputs[1]))?
            }
            OpKind::Concat { axis } => {
                let parts: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                tensor::concat(*axis, &parts)?
            }
            OpKind::Slice { axis, start, len } => {
                if inputs.len() != 1 {
                    return Err(arity_err("slice", 1));
                }
                tensor::slice(self.value(inputs[0]), *axis, *start, *len)?
            }
            OpKind::Sum => {
                if inputs.len() != 1 {
                    return Err(arity_err("sum", 1));
                }
                tensor::sum(self.value(inputs[0]))
            }
            OpKind::Mean => {
                if inputs.len() != 1 {
                    return Err(arity_err("mean", 1));
                }
                tensor::mean(self.value(inputs[0]))
            }
            OpKind::Sigmoid => {
                if inputs.len() != 1 {
                    return Err(arity_err("sigmoid", 1));
                }
                tensor::sigmoid(self.value(inputs[0]))
            }
            OpKind::Tanh => {
                if inputs.len() != 1 {
                    return Err(arity_err("tanh", 1));
                }
                tensor::tanh(self.value(inputs[0]))
            }
            OpKind::LeakyRelu { slope } => {
                if inputs.len() != 1 {
                    return Err(arity_err("leaky_relu", 1));
                }
                tensor::leaky_relu(self.value(inputs[0]), *slope)
            }
            OpKind::Softplus => {
                if inputs.len() != 1 {
                    return Err(arity_err("softplus", 1));
                }
                tensor::softplus(self.value(inputs[0]))
            }
            OpKind::Scale { factor } => {
                if inputs.len() != 1 {
                    return Err(arity_err("scale", 1));
                }
                tensor::scale(self.value(inputs[0]), *factor)
            }
            OpKind::Reshape { shape } => {
                if inputs.len() != 1 {
                    return Err(arity_err("reshape", 1));
                }
                tensor::reshape(self.value(inputs[0]), shape)?
            }
        };
        Ok(self.push(NodeKind::Op { kind, parents: inputs.to_vec() }, value))
    }

    /// Reverse sweep seeded with `dL/dloss = 1`; `loss` must be scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            });
        }
        self.backward_with_seeds(&[(loss, Tensor::scalar(1.0))])
    }

    /// Reverse sweep from arbitrary seed gradients. Useful for joining
    /// gradients across separately built graphs.
    pub fn backward_with_seeds(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut hi = 0usize;
        for (v, g) in seeds {
            if g.shape() != self.value(*v).shape() {
                return Err(Error::Shape {
                    op: "backward",
                    detail: format!(
                        "seed shape {:?} does not match node shape {:?}",
                        g.shape(),
                        self.value(*v).shape()
                    ),
                });
            }
            accum(&mut grads[v.0], g.clone());
            hi = hi.max(v.0);
        }
        for i in (0..=hi).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let NodeKind::Op { kind, parents } = &self.nodes[i].kind {
                self.propagate(kind, parents, &g, &self.nodes[i].value, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        kind: &OpKind,
        parents: &[Var],
        g: &Tensor,
        out: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        match kind {
            OpKind::Matmul => {
                let a = self.value(parents[0]);
                let b = self.value(parents[1]);
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = if b.shape().len() == 2 { b.shape()[1] } else { 1 };
                // dA += G·Bᵀ
                let mut da = vec![0.0; m * k];
                tensor::matmul_nt_into(g.data(), b.data(), m, n, k, &mut da);
                accum(&mut grads[parents[0].0], Tensor::new(vec![m, k], da).unwrap());
                // dB += Aᵀ·G
                let mut db = vec![0.0; k * n];
                tensor::matmul_tn_into(a.data(), g.data(), k, m, n, &mut db);
                let db = if b.shape().len() == 2 {
                    Tensor::new(vec![k, n], db).unwrap()
                } else {
                    Tensor::vector(db)
                };
                accum(&mut grads[parents[1].0], db);
            }
            OpKind::Add => {
                for &p in parents {
                    let pv = self.value(p);
                    if pv.shape() == g.shape() {
                        accum(&mut grads[p.0], g.clone());
                    } else {
                        // broadcast column: gradient is the row-sum over columns
                        let (m, n) = (g.shape()[0], g.shape()[1]);
                        let mut col = vec![0.0; m];
                        for i in 0..m {
                            col[i] = g.data()[i * n..(i + 1) * n].iter().sum();
                        }
                        accum(&mut grads[p.0], Tensor::new(vec![m, 1], col).unwrap());
                    }
                }
            }
            OpKind::Hadamard => {
                let a = self.value(parents[0]);
                let b = self.value(parents[1]);
                accum(&mut grads[parents[0].0], tensor::hadamard(g, b).unwrap());
                accum(&mut grads[parents[1].0], tensor::hadamard(g, a).unwrap());
            }
            OpKind::Concat { axis } => {
                let mut off = 0;
                for &p in parents {
                    let pshape = self.value(p).shape();
                    let len = if pshape.len() == 1 {
                        pshape[0]
                    } else {
                        pshape[*axis]
                    };
                    let part = tensor::slice(g, *axis, off, len).unwrap();
                    let part = if pshape.len() == 1 {
                        Tensor::vector(part.data().to_vec())
                    } else {
                        part
                    };
                    accum(&mut grads[p.0], part);
                    off += len;
                }
            }
            OpKind::Slice { axis, start, len: _ } => {
                let pv = self.value(parents[0]);
                let mut dp = Tensor::zeros(pv.shape());
                scatter_slice(&mut dp, g, *axis, *start);
                accum(&mut grads[parents[0].0], dp);
            }
            OpKind::Sum => {
                let pv = self.value(parents[0]);
                accum(&mut grads[parents[0].0], Tensor::filled(pv.shape(), g.item()));
            }
            OpKind::Mean => {
                let pv = self.value(parents[0]);
                let gv = g.item() / pv.numel() as f64;
                accum(&mut grads[parents[0].0], Tensor::filled(pv.shape(), gv));
            }
            OpKind::Sigmoid => {
                let d: Vec<f64> = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &gv)| gv * s * (1.0 - s))
                    .collect();
                accum(&mut grads[parents[0].0], Tensor::new(out.shape().to_vec(), d).unwrap());
            }
            OpKind::Tanh => {
                let d: Vec<f64> = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&t, &gv)| gv * (1.0 - t * t))
                    .collect();
                accum(&mut grads[parents[0].0], Tensor::new(out.shape().to_vec(), d).unwrap());
            }
            OpKind::LeakyRelu { slope } => {
                let pv = self.value(parents[0]);
                let d: Vec<f64> = pv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| if x >= 0.0 { gv } else { gv * slope })
                    .collect();
                accum(&mut grads[parents[0].0], Tensor::new(pv.shape().to_vec(), d).unwrap());
            }
            OpKind::Softplus => {
                let pv = self.value(parents[0]);
                let d: Vec<f64> = pv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| gv * tensor::sigmoid_scalar(x))
                    .collect();
                accum(&mut grads[parents[0].0], Tensor::new(pv.shape().to_vec(), d).unwrap());
            }
            OpKind::Scale { factor } => {
                accum(&mut grads[parents[0].0], tensor::scale(g, *factor));
            }
            OpKind::Reshape { shape: _ } => {
                let pv = self.value(parents[0]);
                accum(&mut grads[parents[0].0], tensor::reshape(g, pv.shape()).unwrap());
            }
        }
    }
}

fn accum(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(t) => {
            debug_assert_eq!(t.shape(), delta.shape());
            for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

/// Writes `g` into the region of `dst` that `slice(axis, start, ..)` reads.
fn scatter_slice(dst: &mut Tensor, g: &Tensor, axis: usize, start: usize) {
    let rank = dst.shape().len();
    match (rank, axis) {
        (1, 0) | (2, 0) => {
            let cols = if rank == 2 { dst.shape()[1] } else { 1 };
            let off = start * cols;
            let dstd = dst.data_mut();
            for (i, &v) in g.data().iter().enumerate() {
                dstd[off + i] += v;
            }
        }
        (2, 1) => {
            let cols = dst.shape()[1];
            let glen = g.shape()[1];
            let rows = dst.shape()[0];
            let dstd = dst.data_mut();
            for r in 0..rows {
                for c in 0..glen {
                    dstd[r * cols + start + c] += g.data()[r * glen + c];
                }
            }
        }
        _ => unreachable!("slice gradients only exist for shapes slice accepts"),
    }
}

/// Gradient of every node touched by the reverse sweep; untouched nodes
/// (including unreachable leaves) read as exact zeros.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`, or `None` if no path reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient w.r.t. `v`, materializing zeros for unreached nodes.
    pub fn wrt_or_zero(&self, tape: &Tape, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        }
    }
}
