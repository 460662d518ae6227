//! Execution back ends for network forward passes.
//!
//! Model code is written once against [`Exec`]. During training the executor
//! is the [`Tape`], which records every primitive for the backward sweep.
//! During inference it is [`EvalExec`], which computes eagerly and keeps
//! values alive only while something references them — long rollouts then
//! run in constant memory. The two back ends share the same kernels, so
//! their outputs are bitwise identical.

use std::rc::Rc;

use super::tape::{OpKind, Tape, Var};
use super::tensor::{self, Tensor};
use crate::Result;

pub trait Exec {
    type V: Clone;

    /// Non-differentiable input.
    fn constant(&mut self, t: Tensor) -> Self::V;
    /// Differentiable input (a leaf on the tape; a plain value otherwise).
    fn param(&mut self, t: &Tensor) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn hadamard(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn concat(&mut self, axis: usize, parts: &[Self::V]) -> Result<Self::V>;
    fn slice(&mut self, a: &Self::V, axis: usize, start: usize, len: usize) -> Result<Self::V>;
    fn sum(&mut self, a: &Self::V) -> Self::V;
    fn mean(&mut self, a: &Self::V) -> Self::V;
    fn sigmoid(&mut self, a: &Self::V) -> Self::V;
    fn tanh(&mut self, a: &Self::V) -> Self::V;
    fn leaky_relu(&mut self, a: &Self::V, slope: f64) -> Self::V;
    fn softplus(&mut self, a: &Self::V) -> Self::V;
    fn scale(&mut self, a: &Self::V, c: f64) -> Self::V;
    fn reshape(&mut self, a: &Self::V, shape: &[usize]) -> Result<Self::V>;
}

impl Exec for Tape {
    type V = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        Tape::constant(self, t)
    }

    fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone())
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        Tape::value(self, *v)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.forward_op(OpKind::Matmul, &[*a, *b])
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.forward_op(OpKind::Add, &[*a, *b])
    }

    fn hadamard(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.forward_op(OpKind::Hadamard, &[*a, *b])
    }

    fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        self.forward_op(OpKind::Concat { axis }, parts)
    }

    fn slice(&mut self, a: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.forward_op(OpKind::Slice { axis, start, len }, &[*a])
    }

    fn sum(&mut self, a: &Var) -> Var {
        self.forward_op(OpKind::Sum, &[*a]).expect("sum is shape-free")
    }

    fn mean(&mut self, a: &Var) -> Var {
        self.forward_op(OpKind::Mean, &[*a]).expect("mean is shape-free")
    }

    fn sigmoid(&mut self, a: &Var) -> Var {
        self.forward_op(OpKind::Sigmoid, &[*a]).expect("sigmoid is shape-free")
    }

    fn tanh(&mut self, a: &Var) -> Var {
        self.forward_op(OpKind::Tanh, &[*a]).expect("tanh is shape-free")
    }

    fn leaky_relu(&mut self, a: &Var, slope: f64) -> Var {
        self.forward_op(OpKind::LeakyRelu { slope }, &[*a]).expect("leaky_relu is shape-free")
    }

    fn softplus(&mut self, a: &Var) -> Var {
        self.forward_op(OpKind::Softplus, &[*a]).expect("softplus is shape-free")
    }

    fn scale(&mut self, a: &Var, c: f64) -> Var {
        self.forward_op(OpKind::Scale { factor: c }, &[*a]).expect("scale is shape-free")
    }

    fn reshape(&mut self, a: &Var, shape: &[usize]) -> Result<Var> {
        self.forward_op(OpKind::Reshape { shape: shape.to_vec() }, &[*a])
    }
}

/// Eager evaluator: values are reference-counted tensors, nothing is
/// recorded, and dropping a handle frees its storage.
#[derive(Default)]
pub struct EvalExec;

impl EvalExec {
    pub fn new() -> Self {
        EvalExec
    }
}

impl Exec for EvalExec {
    type V = Rc<Tensor>;

    fn constant(&mut self, t: Tensor) -> Rc<Tensor> {
        Rc::new(t)
    }

    fn param(&mut self, t: &Tensor) -> Rc<Tensor> {
        Rc::new(t.clone())
    }

    fn value<'a>(&'a self, v: &'a Rc<Tensor>) -> &'a Tensor {
        v
    }

    fn matmul(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        tensor::matmul(a, b).map(Rc::new)
    }

    fn add(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        tensor::add(a, b).map(Rc::new)
    }

    fn hadamard(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        tensor::hadamard(a, b).map(Rc::new)
    }

    fn concat(&mut self, axis: usize, parts: &[Rc<Tensor>]) -> Result<Rc<Tensor>> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| p.as_ref()).collect();
        tensor::concat(axis, &refs).map(Rc::new)
    }

    fn slice(&mut self, a: &Rc<Tensor>, axis: usize, start: usize, len: usize) -> Result<Rc<Tensor>> {
        tensor::slice(a, axis, start, len).map(Rc::new)
    }

    fn sum(&mut self, a: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(tensor::sum(a))
    }

    fn mean(&mut self, a: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(tensor::mean(a))
    }

    fn sigmoid(&mut self, a: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(tensor::sigmoid(a))
    }

    fn tanh(&mut self, a: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(tensor::tanh(a))
    }

    fn leaky_relu(&mut self, a: &Rc<Tensor>, slope: f64) -> Rc<Tensor> {
        Rc::new(tensor::leaky_relu(a, slope))
    }

    fn softplus(&mut self, a: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(tensor::softplus(a))
    }

    fn scale(&mut self, a: &Rc<Tensor>, c: f64) -> Rc<Tensor> {
        Rc::new(tensor::scale(a, c))
    }

    fn reshape(&mut self, a: &Rc<Tensor>, shape: &[usize]) -> Result<Rc<Tensor>> {
        tensor::reshape(a, shape).map(Rc::new)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The two back ends run the same kernels; a chained computation must
    /// agree bit for bit.
    #[test]
    fn tape_and_eager_agree_bitwise() {
        fn chain<E: Exec>(ex: &mut E) -> Vec<f64> {
            let w = ex.param(&Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.7, 0.9, -1.1]).unwrap());
            let x = ex.constant(Tensor::matrix(3, 2, vec![0.5, 1.5, -0.5, 2.0, 0.25, -0.75]).unwrap());
            let y = ex.matmul(&w, &x).unwrap();
            let s = ex.sigmoid(&y);
            let t = ex.tanh(&s);
            let sp = ex.softplus(&t);
            let lr = ex.leaky_relu(&sp, 0.01);
            let sc = ex.scale(&lr, -1.37);
            ex.value(&sc).data().to_vec()
        }
        let mut tape = Tape::new();
        let a = chain(&mut tape);
        let mut eager = EvalExec::new();
        let b = chain(&mut eager);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
