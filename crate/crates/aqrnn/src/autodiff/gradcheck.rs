//! Central finite-difference verification of tape gradients.

use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Compares analytic gradients with central differences.
///
/// `build` must construct the computation on the given tape from leaves that
/// correspond 1:1 to `inputs` and return a scalar loss. Up to
/// `samples_per_input` coordinates are probed per input tensor (all of them
/// when the tensor is small). Returns the maximum relative error
/// `|a − n| / max(1e-12, |a| + |n|)` over the probed coordinates.
pub fn grad_check<F>(
    build: F,
    inputs: &[Tensor],
    step: f64,
    samples_per_input: usize,
    rng: &mut impl Rng,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Shape {
            op: "grad_check",
            detail: format!("loss must be scalar, got {:?}", tape.value(loss).shape()),
        });
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt_or_zero(&tape, v)).collect();
    drop(tape);

    let value_at = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    for ti in 0..inputs.len() {
        let n = inputs[ti].numel();
        let coords: Vec<usize> = if n <= samples_per_input {
            (0..n).collect()
        } else {
            (0..samples_per_input).map(|_| rng.gen_range(0..n)).collect()
        };
        for ci in coords {
            let orig = work[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + step;
            let up = value_at(&work)?;
            work[ti].data_mut()[ci] = orig - step;
            let down = value_at(&work)?;
            work[ti].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[ti].data()[ci];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
