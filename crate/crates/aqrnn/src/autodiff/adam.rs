//! Adam optimizer over a flat list of parameter tensors.

use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second-moment state per parameter tensor.
///
/// Each tensor keeps its own step counter: a tensor whose gradient is
/// entirely zero in some update is skipped outright — no moment decay, no
/// step increment — so parameters that did not participate (per-series
/// adapters of out-of-batch series, deselected team members) stay bitwise
/// unchanged, and bias correction on the first *real* step of a late starter
/// behaves like step one.
pub struct AdamState {
    pub params: AdamParams,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: Vec<u64>,
}

impl AdamState {
    pub fn new(shapes: &[&[usize]], params: AdamParams) -> Self {
        AdamState {
            params,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: vec![0; shapes.len()],
        }
    }

    pub fn for_tensors(tensors: &[Tensor], params: AdamParams) -> Self {
        let shapes: Vec<&[usize]> = tensors.iter().map(|t| t.shape()).collect();
        AdamState::new(&shapes, params)
    }

    /// One optimization step. `lrs[i]` is the effective learning rate for
    /// tensor `i` (base rate times any group multiplier).
    pub fn step(&mut self, tensors: &mut [Tensor], grads: &[Tensor], lrs: &[f64]) -> Result<()> {
        assert_eq!(tensors.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        assert_eq!(lrs.len(), self.m.len());
        let AdamParams { beta1, beta2, eps } = self.params;
        for i in 0..tensors.len() {
            let g = &grads[i];
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in parameter tensor {i}")));
            }
            if g.data().iter().all(|&x| x == 0.0) {
                continue;
            }
            self.t[i] += 1;
            let bc1 = 1.0 - beta1.powi(self.t[i] as i32);
            let bc2 = 1.0 - beta2.powi(self.t[i] as i32);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = tensors[i].data_mut();
            let lr = lrs[i];
            for ((pj, gj), (mj, vj)) in p.iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *pj -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
