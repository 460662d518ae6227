//! Dense row-major `f64` tensors and the forward kernels shared by the tape
//! and the eager evaluator.
//!
//! Only ranks 1 and 2 appear in practice: vectors `[n]` and matrices
//! `[rows, cols]`. Scalars are singleton vectors `[1]`.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 2 {
            return Err(shape_err("tensor", format!("unsupported rank {:?}", shape)));
        }
        if numel != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { shape: vec![1], data: vec![x] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn filled(shape: &[usize], x: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![x; numel] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Scalar contents of a `[1]` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }
}

// ── Raw matmul kernels (row-major) ──────────────────────────────────────────

/// C += A·B with A `[m,k]`, B `[k,n]`.
pub(crate) fn matmul_nn_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[l * n..(l + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

/// C += A·Bᵀ with A `[m,k]`, B `[n,k]`.
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// C += Aᵀ·B with A `[k,m]`, B `[k,n]`.
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let crow = &mut out[i * n..(i + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

// ── Forward kernels ─────────────────────────────────────────────────────────

/// `[m,k]·[k,n] -> [m,n]`, or `[m,k]·[k] -> [m]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.shape.len(), b.shape.len()) {
        (2, 2) => {
            let (m, k) = (a.shape[0], a.shape[1]);
            let (k2, n) = (b.shape[0], b.shape[1]);
            if k != k2 {
                return Err(shape_err(
                    "matmul",
                    format!("inner dims differ: {:?} vs {:?}", a.shape, b.shape),
                ));
            }
            let mut out = vec![0.0; m * n];
            matmul_nn_into(&a.data, &b.data, m, k, n, &mut out);
            Tensor::new(vec![m, n], out)
        }
        (2, 1) => {
            let (m, k) = (a.shape[0], a.shape[1]);
            if k != b.shape[0] {
                return Err(shape_err(
                    "matmul",
                    format!("inner dims differ: {:?} vs {:?}", a.shape, b.shape),
                ));
            }
            let mut out = vec![0.0; m];
            matmul_nn_into(&a.data, &b.data, m, k, 1, &mut out);
            Ok(Tensor::vector(out))
        }
        _ => Err(shape_err(
            "matmul",
            format!("unsupported operand shapes {:?} and {:?}", a.shape, b.shape),
        )),
    }
}

/// Elementwise sum. Also broadcasts a column `[m,1]` across a matrix `[m,n]`
/// (in either argument order), which is how biases are applied to batched
/// activations.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
        return Ok(Tensor { shape: a.shape.clone(), data });
    }
    if let Some(t) = add_broadcast(a, b) {
        return Ok(t);
    }
    if let Some(t) = add_broadcast(b, a) {
        return Ok(t);
    }
    Err(shape_err("add", format!("operand shapes {:?} and {:?}", a.shape, b.shape)))
}

fn add_broadcast(mat: &Tensor, col: &Tensor) -> Option<Tensor> {
    if mat.shape.len() == 2 && col.shape.len() == 2 && col.shape[1] == 1 && mat.shape[0] == col.shape[0] {
        let (m, n) = (mat.shape[0], mat.shape[1]);
        let mut data = mat.data.clone();
        for i in 0..m {
            let c = col.data[i];
            for v in &mut data[i * n..(i + 1) * n] {
                *v += c;
            }
        }
        Some(Tensor { shape: mat.shape.clone(), data })
    } else {
        None
    }
}

pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(shape_err("hadamard", format!("operand shapes {:?} and {:?}", a.shape, b.shape)));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Ok(Tensor { shape: a.shape.clone(), data })
}

/// Concatenate along `axis`. Vectors concatenate along axis 0; matrices along
/// rows (axis 0) or columns (axis 1).
pub fn concat(axis: usize, parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(shape_err("concat", "no parts".into()));
    }
    let rank = parts[0].shape.len();
    if parts.iter().any(|p| p.shape.len() != rank) {
        return Err(shape_err("concat", "mixed ranks".into()));
    }
    match (rank, axis) {
        (1, 0) => {
            let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
            for p in parts {
                data.extend_from_slice(&p.data);
            }
            Ok(Tensor::vector(data))
        }
        (2, 0) => {
            let cols = parts[0].shape[1];
            if parts.iter().any(|p| p.shape[1] != cols) {
                return Err(shape_err("concat", "column counts differ across parts".into()));
            }
            let rows: usize = parts.iter().map(|p| p.shape[0]).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for p in parts {
                data.extend_from_slice(&p.data);
            }
            Tensor::new(vec![rows, cols], data)
        }
        (2, 1) => {
            let rows = parts[0].shape[0];
            if parts.iter().any(|p| p.shape[0] != rows) {
                return Err(shape_err("concat", "row counts differ across parts".into()));
            }
            let cols: usize = parts.iter().map(|p| p.shape[1]).sum();
            let mut data = vec![0.0; rows * cols];
            let mut off = 0;
            for p in parts {
                let pc = p.shape[1];
                for r in 0..rows {
                    data[r * cols + off..r * cols + off + pc]
                        .copy_from_slice(&p.data[r * pc..(r + 1) * pc]);
                }
                off += pc;
            }
            Tensor::new(vec![rows, cols], data)
        }
        _ => Err(shape_err("concat", format!("axis {} invalid for rank {}", axis, rank))),
    }
}

/// Contiguous range `start..start+len` along `axis`.
pub fn slice(a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let rank = a.shape.len();
    let bound_err = || {
        shape_err(
            "slice",
            format!("range {}..{} out of bounds on axis {} of {:?}", start, start + len, axis, a.shape),
        )
    };
    match (rank, axis) {
        (1, 0) => {
            if start + len > a.shape[0] {
                return Err(bound_err());
            }
            Ok(Tensor::vector(a.data[start..start + len].to_vec()))
        }
        (2, 0) => {
            let cols = a.shape[1];
            if start + len > a.shape[0] {
                return Err(bound_err());
            }
            Tensor::new(vec![len, cols], a.data[start * cols..(start + len) * cols].to_vec())
        }
        (2, 1) => {
            let (rows, cols) = (a.shape[0], a.shape[1]);
            if start + len > cols {
                return Err(bound_err());
            }
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&a.data[r * cols + start..r * cols + start + len]);
            }
            Tensor::new(vec![rows, len], data)
        }
        _ => Err(shape_err("slice", format!("axis {} invalid for rank {}", axis, rank))),
    }
}

pub fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data.iter().sum())
}

pub fn mean(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data.iter().sum::<f64>() / a.numel() as f64)
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn tanh(a: &Tensor) -> Tensor {
    a.map(f64::tanh)
}

/// `x` for `x >= 0`, `slope·x` otherwise.
pub fn leaky_relu(a: &Tensor, slope: f64) -> Tensor {
    a.map(|x| if x >= 0.0 { x } else { slope * x })
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus(a: &Tensor) -> Tensor {
    a.map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p())
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|x| c * x)
}

/// Reinterprets the row-major data under a new shape of equal size.
pub fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != a.numel() || shape.is_empty() || shape.len() > 2 {
        return Err(Error::Shape {
            op: "reshape",
            detail: format!("{:?} cannot be viewed as {:?}", a.shape(), shape),
        });
    }
    Tensor::new(shape.to_vec(), a.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn matmul_matrix_vector() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let v = Tensor::vector(vec![1.0, 0.0, -1.0]);
        let out = matmul(&a, &v).unwrap();
        assert_eq!(out.shape(), &[2]);
        assert_eq!(out.data(), &[-2.0, -2.0]);
    }

    #[test]
    fn matmul_matrix_matrix() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn add_broadcasts_column() {
        let m = Tensor::matrix(2, 3, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let c = Tensor::matrix(2, 1, vec![10.0, 20.0]).unwrap();
        let out = add(&m, &c).unwrap();
        assert_eq!(out.data(), &[10.0, 11.0, 12.0, 23.0, 24.0, 25.0]);
        // symmetric
        let out2 = add(&c, &m).unwrap();
        assert_eq!(out.data(), out2.data());
    }

    #[test]
    fn concat_vectors_matches_example() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0]);
        let out = concat(0, &[&a, &b]).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn concat_columns() {
        let a = Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![2.0, 9.0, 4.0, 9.0]).unwrap();
        let out = concat(1, &[&a, &b]).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        assert_eq!(out.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 9.0]);
    }

    #[test]
    fn slice_rows_and_cols() {
        let m = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let rows = slice(&m, 0, 1, 2).unwrap();
        assert_eq!(rows.data(), &[3.0, 4.0, 5.0, 6.0]);
        let col = slice(&m, 1, 1, 1).unwrap();
        assert_eq!(col.shape(), &[3, 1]);
        assert_eq!(col.data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn slice_vector_matches_example() {
        let v = Tensor::vector(vec![10.0, 11.0, 12.0, 13.0]);
        let out = slice(&v, 0, 1, 2).unwrap();
        assert_eq!(out.data(), &[11.0, 12.0]);
    }

    #[test]
    fn activation_values() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        assert_abs_diff_eq!(sigmoid(&Tensor::scalar(0.0)).item(), 0.5);
        assert_eq!(leaky_relu(&x, 0.01).data(), &[-0.01, 0.0, 2.0]);
        assert_abs_diff_eq!(softplus(&Tensor::scalar(0.0)).item(), 2f64.ln(), epsilon = 1e-15);
        // softplus stays finite and accurate far into both tails
        assert_abs_diff_eq!(softplus(&Tensor::scalar(50.0)).item(), 50.0, epsilon = 1e-12);
        assert!(softplus(&Tensor::scalar(-745.0)).item() >= 0.0);
    }

    #[test]
    fn reductions() {
        let m = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(sum(&m).item(), 10.0);
        assert_eq!(mean(&m).item(), 2.5);
    }
}
