//! The dilated recurrent cell: four gates fed by the input, the most recent
//! controlling state, and a delayed controlling state, with a cell state
//! split into a real output (passed up the stack) and a controlling part
//! (kept for the gates).

use rand::Rng;

use crate::autodiff::{Exec, Tensor};
use crate::{Error, Result};

/// Uniform initialization in `[-1/√fanin, +1/√fanin]`.
pub fn uniform_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("sized above")
}

/// Bias column `[rows, 1]`; `fanin` is the input dimension of the layer the
/// bias belongs to, matching the linear-layer convention.
pub fn uniform_bias(rows: usize, fanin: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fanin as f64).sqrt();
    let data = (0..rows).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::matrix(rows, 1, data).expect("sized above")
}

/// One gate's parameters: `W` (input), `V` (recent state), `U` (delayed
/// state), `b` (bias column). Generic over the value kind so the same
/// structure holds stored tensors, parameter-store indices, or executor
/// handles.
#[derive(Debug, Clone)]
pub struct Gate<V> {
    pub w: V,
    pub v: V,
    pub u: V,
    pub b: V,
}

impl<V> Gate<V> {
    pub fn map<W>(&self, mut f: impl FnMut(&V) -> W) -> Gate<W> {
        Gate { w: f(&self.w), v: f(&self.v), u: f(&self.u), b: f(&self.b) }
    }

    pub fn visit(&self, gate: &str, f: &mut impl FnMut(String, &V)) {
        f(format!("{gate}.w"), &self.w);
        f(format!("{gate}.v"), &self.v);
        f(format!("{gate}.u"), &self.u);
        f(format!("{gate}.b"), &self.b);
    }
}

/// Full cell: forget/input/candidate gates sized to the cell state
/// (`hidden + out` rows) and an output gate sized to the controlling state
/// (`hidden` rows).
#[derive(Debug, Clone)]
pub struct Cell<V> {
    pub f: Gate<V>,
    pub i: Gate<V>,
    pub g: Gate<V>,
    pub o: Gate<V>,
}

impl<V> Cell<V> {
    pub fn map<W>(&self, mut f: impl FnMut(&V) -> W) -> Cell<W> {
        Cell { f: self.f.map(&mut f), i: self.i.map(&mut f), g: self.g.map(&mut f), o: self.o.map(&mut f) }
    }

    /// Visits every tensor with a stable dotted name (`f.w`, `f.v`, … `o.b`).
    pub fn visit(&self, f: &mut impl FnMut(String, &V)) {
        self.f.visit("f", f);
        self.i.visit("i", f);
        self.g.visit("g", f);
        self.o.visit("o", f);
    }
}

impl Cell<Tensor> {
    /// Fresh cell for inputs of `input_dim`, controlling size `hidden`, and
    /// real output size `out`. The cell state has `hidden + out` rows.
    pub fn init<R: Rng>(input_dim: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        fn gate<R: Rng>(rows: usize, input_dim: usize, hidden: usize, rng: &mut R) -> Gate<Tensor> {
            Gate {
                w: uniform_matrix(rows, input_dim, rng),
                v: uniform_matrix(rows, hidden, rng),
                u: uniform_matrix(rows, hidden, rng),
                b: uniform_bias(rows, input_dim, rng),
            }
        }
        let c_rows = hidden + out;
        Cell {
            f: gate(c_rows, input_dim, hidden, rng),
            i: gate(c_rows, input_dim, hidden, rng),
            g: gate(c_rows, input_dim, hidden, rng),
            o: gate(hidden, input_dim, hidden, rng),
        }
    }
}

/// Ring-buffer state for one cell rolled along one stream. Slot `s % d`
/// holds step `s`; reads happen before the overwrite, so at step `t` the
/// buffers expose exactly `h_{t−1}` and `h_{t−d}`. Unwritten slots read as
/// missing and contribute nothing (the zero-state warmup convention).
#[derive(Debug, Clone)]
pub struct CellState<V> {
    label: String,
    dilation: usize,
    step: usize,
    h: Vec<Option<V>>,
    c: Vec<Option<V>>,
}

impl<V: Clone> CellState<V> {
    pub fn cold(dilation: usize) -> Self {
        Self::cold_labeled(dilation, "cell")
    }

    pub fn cold_labeled(dilation: usize, label: impl Into<String>) -> Self {
        let d = dilation.max(1);
        CellState {
            label: label.into(),
            dilation: d,
            step: 0,
            h: vec![None; d],
            c: vec![None; d],
        }
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn step_index(&self) -> usize {
        self.step
    }
}

fn gate_pre<E: Exec>(
    ex: &mut E,
    gate: &Gate<E::V>,
    x: &E::V,
    h_prev: &Option<E::V>,
    h_delayed: &Option<E::V>,
) -> Result<E::V> {
    let mut acc = ex.matmul(&gate.w, x)?;
    if let Some(h) = h_prev {
        let vh = ex.matmul(&gate.v, h)?;
        acc = ex.add(&acc, &vh)?;
    }
    if let Some(h) = h_delayed {
        let uh = ex.matmul(&gate.u, h)?;
        acc = ex.add(&acc, &uh)?;
    }
    ex.add(&acc, &gate.b)
}

fn one_minus<E: Exec>(ex: &mut E, v: &E::V) -> Result<E::V> {
    let ones = ex.constant(Tensor::filled(ex.value(v).shape(), 1.0));
    let neg = ex.scale(v, -1.0);
    ex.add(&neg, &ones)
}

/// Advances the cell by one step on input `x` (columns are batch entries)
/// and returns the real output `y_t` (`out` rows). The gates,
///
/// ```text
/// f = σ(W_f x + V_f h_prev + U_f h_delayed + b_f)      (i, g, o alike; g via tanh)
/// c̃ = f ⊙ c_prev + (1 − f) ⊙ c_delayed
/// c  = i ⊙ g + (1 − i) ⊙ c̃
/// [y; m] = c; h = o ⊙ tanh(m)
/// ```
///
/// skip terms whose state is still missing, which is numerically identical
/// to substituting zero vectors but keeps the tape free of dead nodes.
pub fn cell_step<E: Exec>(
    ex: &mut E,
    cell: &Cell<E::V>,
    state: &mut CellState<E::V>,
    x: &E::V,
) -> Result<E::V> {
    let d = state.dilation;
    let t = state.step;
    let h_prev = state.h[(t + d - 1) % d].clone();
    let h_delayed = state.h[t % d].clone();
    let c_prev = state.c[(t + d - 1) % d].clone();
    let c_delayed = state.c[t % d].clone();

    let run = |ex: &mut E| -> Result<(E::V, E::V, E::V)> {
        let pre_f = gate_pre(ex, &cell.f, x, &h_prev, &h_delayed)?;
        let f = ex.sigmoid(&pre_f);
        let pre_i = gate_pre(ex, &cell.i, x, &h_prev, &h_delayed)?;
        let i = ex.sigmoid(&pre_i);
        let pre_g = gate_pre(ex, &cell.g, x, &h_prev, &h_delayed)?;
        let g = ex.tanh(&pre_g);
        let pre_o = gate_pre(ex, &cell.o, x, &h_prev, &h_delayed)?;
        let o = ex.sigmoid(&pre_o);

        let c_mix = match (&c_prev, &c_delayed) {
            (None, None) => None,
            (Some(cp), None) => Some(ex.hadamard(&f, cp)?),
            (None, Some(cd)) => {
                let omf = one_minus(ex, &f)?;
                Some(ex.hadamard(&omf, cd)?)
            }
            (Some(cp), Some(cd)) => {
                let keep = ex.hadamard(&f, cp)?;
                let omf = one_minus(ex, &f)?;
                let swap = ex.hadamard(&omf, cd)?;
                Some(ex.add(&keep, &swap)?)
            }
        };
        let ig = ex.hadamard(&i, &g)?;
        let c_t = match &c_mix {
            None => ig,
            Some(cm) => {
                let omi = one_minus(ex, &i)?;
                let carry = ex.hadamard(&omi, cm)?;
                ex.add(&ig, &carry)?
            }
        };

        let c_rows = ex.value(&c_t).shape()[0];
        let hidden = ex.value(&cell.o.b).shape()[0];
        let out = c_rows - hidden;
        let y = ex.slice(&c_t, 0, 0, out)?;
        let m = ex.slice(&c_t, 0, out, hidden)?;
        let tm = ex.tanh(&m);
        let h_t = ex.hadamard(&o, &tm)?;
        Ok((y, c_t, h_t))
    };

    let (y, c_t, h_t) = run(ex).map_err(|e| match e {
        Error::Shape { op, detail } => Error::Shape {
            op,
            detail: format!("{} (dilation {}): {}", state.label, d, detail),
        },
        other => other,
    })?;
    state.h[t % d] = Some(h_t);
    state.c[t % d] = Some(c_t);
    state.step += 1;
    Ok(y)
}
