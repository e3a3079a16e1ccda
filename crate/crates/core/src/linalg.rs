//! Dense f64 vector/matrix kernel.
//!
//! Just the primitives the rest of the crate needs: matrix products,
//! stable softmax, and scaled dot-product attention. All reductions run
//! sequentially left-to-right so results are bit-reproducible under a
//! fixed seed, and everything stays in f64.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("shape mismatch: {left} vs {right} in {op}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("empty input to {0}")]
    EmptyInput(&'static str),
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense vector of finite f64 entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite(i));
        }
        Ok(Self { data })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            data: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(LinalgError::ShapeMismatch {
                op: "dot",
                left: format!("{}", self.dim()),
                right: format!("{}", other.dim()),
            });
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn scaled(&self, c: f64) -> Vector {
        Vector {
            data: self.data.iter().map(|x| x * c).collect(),
        }
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        if self.dim() != other.dim() {
            return Err(LinalgError::ShapeMismatch {
                op: "add",
                left: format!("{}", self.dim()),
                right: format!("{}", other.dim()),
            });
        }
        Ok(Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }
}

/// Dense row-major matrix of finite f64 entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::ShapeMismatch {
                op: "matrix-new",
                left: format!("{rows}x{cols}"),
                right: format!("len {}", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite(i));
        }
        Ok(Self { data, rows, cols })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vector]) -> Result<Self> {
        if rows.is_empty() {
            return Err(LinalgError::EmptyInput("from_rows"));
        }
        let cols = rows[0].dim();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.dim() != cols {
                return Err(LinalgError::ShapeMismatch {
                    op: "from_rows",
                    left: format!("row 0 has {cols}"),
                    right: format!("row {i} has {}", r.dim()),
                });
            }
            data.extend_from_slice(r.data());
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_vector(&self, r: usize) -> Vector {
        Vector {
            data: self.row(r).to_vec(),
        }
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        Matrix {
            data: self.data.iter().map(|x| x * c).collect(),
            rows: self.rows,
            cols: self.cols,
        }
    }

    /// self += scale * a ⊗ b (rank-one update).
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (i, av) in a.iter().enumerate() {
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (cell, bv) in row.iter_mut().zip(b) {
                *cell += scale * av * bv;
            }
        }
    }

    /// row r += scale * v.
    pub fn add_row(&mut self, r: usize, scale: f64, v: &[f64]) {
        debug_assert_eq!(v.len(), self.cols);
        let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
        for (cell, x) in row.iter_mut().zip(v) {
            *cell += scale * x;
        }
    }

    /// Matrix-vector product `self * x`.
    pub fn matvec(&self, x: &Vector) -> Result<Vector> {
        if self.cols != x.dim() {
            return Err(LinalgError::ShapeMismatch {
                op: "matvec",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}", x.dim()),
            });
        }
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            out[r] = dot(self.row(r), x.data());
        }
        Ok(Vector { data: out })
    }

    /// Transposed matrix-vector product `selfᵀ * x`.
    pub fn matvec_transposed(&self, x: &Vector) -> Result<Vector> {
        if self.rows != x.dim() {
            return Err(LinalgError::ShapeMismatch {
                op: "matvec-transposed",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}", x.dim()),
            });
        }
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xv = x.data()[r];
            for (o, m) in out.iter_mut().zip(self.row(r)) {
                *o += xv * m;
            }
        }
        Ok(Vector { data: out })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Standard matrix product with deterministic left-to-right accumulation
/// per output cell.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(LinalgError::ShapeMismatch {
            op: "matmul",
            left: format!("{}x{}", a.rows, a.cols),
            right: format!("{}x{}", b.rows, b.cols),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// Softmax over a raw slice with max-subtraction. Caller guarantees the
/// slice is non-empty and finite.
pub(crate) fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Numerically stable softmax. Entries are positive and sum to 1;
/// argmax is preserved.
pub fn softmax(v: &Vector) -> Result<Vector> {
    if v.dim() == 0 {
        return Err(LinalgError::EmptyInput("softmax"));
    }
    Ok(Vector {
        data: softmax_slice(v.data()),
    })
}

/// log(Σ exp(x_i)) with max-subtraction.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax(Q Kᵀ / √d) V with the softmax applied per row of Q Kᵀ.
/// Returns the output rows together with the attention weight rows.
pub fn scaled_dot_attention_with_weights(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
) -> Result<(Matrix, Matrix)> {
    if q.cols != k.cols {
        return Err(LinalgError::ShapeMismatch {
            op: "attention-qk",
            left: format!("{}x{}", q.rows, q.cols),
            right: format!("{}x{}", k.rows, k.cols),
        });
    }
    if k.rows != v.rows {
        return Err(LinalgError::ShapeMismatch {
            op: "attention-kv",
            left: format!("{}x{}", k.rows, k.cols),
            right: format!("{}x{}", v.rows, v.cols),
        });
    }
    let scale = 1.0 / (q.cols as f64).sqrt();
    let mut weights = Matrix::zeros(q.rows, k.rows);
    let mut out = Matrix::zeros(q.rows, v.cols);
    for i in 0..q.rows {
        let scores: Vec<f64> = (0..k.rows)
            .map(|j| dot(q.row(i), k.row(j)) * scale)
            .collect();
        let w = softmax_slice(&scores);
        for (j, wj) in w.iter().enumerate() {
            weights.set(i, j, *wj);
            for c in 0..v.cols {
                let cur = out.get(i, c);
                out.set(i, c, cur + wj * v.get(j, c));
            }
        }
    }
    Ok((out, weights))
}

/// Softmax(Q Kᵀ / √d) V; each output row is a convex combination of the
/// rows of `v`.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<Matrix> {
    scaled_dot_attention_with_weights(q, k, v).map(|(out, _)| out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn matmul_identity() {
        let m = Matrix::new(2, 2, vec![3.0, -1.5, 2.25, 4.0]).unwrap();
        let i = Matrix::identity(2);
        assert_eq!(matmul(&i, &m).unwrap(), m);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let m = Matrix::new(2, 2, vec![3.0, -1.5, 2.25, 4.0]).unwrap();
        let z = Matrix::zeros(2, 2);
        assert_eq!(matmul(&z, &m).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn matmul_hand_example() {
        // [[1,2],[3,4]] x [[5],[6]] = [[1*5+2*6],[3*5+4*6]] = [[17],[39]]
        let a = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::new(2, 1, vec![5.0, 6.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 2);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("2x2"), "{msg}");
    }

    #[test]
    fn softmax_symmetry_and_singleton() {
        let v = Vector::new(vec![0.0, 0.0]).unwrap();
        assert_eq!(softmax(&v).unwrap().data(), &[0.5, 0.5]);
        for c in [-1e6, -3.7, 0.0, 42.0, 1e6] {
            let v = Vector::new(vec![c]).unwrap();
            assert_eq!(softmax(&v).unwrap().data(), &[1.0]);
        }
    }

    #[test]
    fn softmax_hand_example() {
        // Oracle: direct exp/sum evaluation of [1,2,3].
        let exps = [1f64.exp(), 2f64.exp(), 3f64.exp()];
        let sum: f64 = exps.iter().sum();
        let expected: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        assert_abs_diff_eq!(expected[0], 0.09003057317038046, epsilon = 1e-15);
        assert_abs_diff_eq!(expected[1], 0.24472847105479767, epsilon = 1e-15);
        assert_abs_diff_eq!(expected[2], 0.6652409557748219, epsilon = 1e-15);

        let got = softmax(&Vector::new(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        for (g, e) in got.data().iter().zip(&expected) {
            assert_abs_diff_eq!(g, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_empty_errors() {
        let v = Vector::new(vec![]).unwrap();
        assert_eq!(softmax(&v).unwrap_err(), LinalgError::EmptyInput("softmax"));
    }

    #[test]
    fn attention_single_key_row() {
        let q = Matrix::new(1, 2, vec![0.3, -0.9]).unwrap();
        let k = Matrix::new(1, 2, vec![5.0, 5.0]).unwrap();
        let v = Matrix::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn attention_uniform_on_zero_scores() {
        // Orthogonal q and k rows: all scores zero, weights uniform,
        // output is the column-wise mean of v.
        let q = Matrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        let k = Matrix::new(2, 2, vec![0.0, 1.0, 0.0, -1.0]).unwrap();
        let v = Matrix::new(2, 2, vec![2.0, 0.0, 0.0, 4.0]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        assert_abs_diff_eq!(out.get(0, 0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.get(0, 1), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn attention_hand_example() {
        // q=[[1,0]], k=[[1,0],[0,1]], v=[[1,0],[0,1]], d=2.
        // Scores: [1/sqrt(2), 0]; weights = softmax of those; output row
        // equals the weights themselves given this v.
        let q = Matrix::new(1, 2, vec![1.0, 0.0]).unwrap();
        let k = Matrix::identity(2);
        let v = Matrix::identity(2);
        let (out, w) = scaled_dot_attention_with_weights(&q, &k, &v).unwrap();

        let s0 = 1.0 / 2f64.sqrt();
        let e0 = s0.exp();
        let w0 = e0 / (e0 + 1.0);
        assert_abs_diff_eq!(w.get(0, 0), w0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.get(0, 0), w0, epsilon = 1e-15);
        assert_abs_diff_eq!(out.get(0, 1), 1.0 - w0, epsilon = 1e-15);
        // Frozen oracle values.
        assert_abs_diff_eq!(out.get(0, 0), 0.6697615493266569, epsilon = 1e-12);
        assert_abs_diff_eq!(out.get(0, 1), 0.3302384506733431, epsilon = 1e-12);
    }

    #[test]
    fn log_sum_exp_matches_direct() {
        let v = [-2.0f64, 0.5, 3.0];
        let direct = v.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert_abs_diff_eq!(log_sum_exp(&v), direct, epsilon = 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    fn finite_vec(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, len)
    }

    fn argmax(v: &[f64]) -> usize {
        let mut best = 0;
        for (i, x) in v.iter().enumerate() {
            if *x > v[best] {
                best = i;
            }
        }
        best
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_preserves_argmax(data in finite_vec(1..24)) {
            let v = Vector::new(data.clone()).unwrap();
            let s = softmax(&v).unwrap();
            let sum: f64 = s.data().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(s.data().iter().all(|p| *p > 0.0));
            prop_assert_eq!(argmax(s.data()), argmax(&data));
        }

        #[test]
        fn softmax_shift_invariance(data in finite_vec(1..16), c in -30.0f64..30.0) {
            let a = softmax(&Vector::new(data.clone()).unwrap()).unwrap();
            let shifted: Vec<f64> = data.iter().map(|x| x + c).collect();
            let b = softmax(&Vector::new(shifted).unwrap()).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn attention_rows_stay_in_value_envelope(
            qd in prop::collection::vec(-3.0f64..3.0, 6),
            kd in prop::collection::vec(-3.0f64..3.0, 9),
            vd in prop::collection::vec(-5.0f64..5.0, 12),
        ) {
            let q = Matrix::new(2, 3, qd).unwrap();
            let k = Matrix::new(3, 3, kd).unwrap();
            let v = Matrix::new(3, 4, vd).unwrap();
            let out = scaled_dot_attention(&q, &k, &v).unwrap();
            for i in 0..out.rows() {
                for c in 0..out.cols() {
                    let col: Vec<f64> = (0..v.rows()).map(|r| v.get(r, c)).collect();
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(out.get(i, c) >= lo - 1e-12 && out.get(i, c) <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn matmul_associative(
            ad in prop::collection::vec(-2.0f64..2.0, 6),
            bd in prop::collection::vec(-2.0f64..2.0, 12),
            cd in prop::collection::vec(-2.0f64..2.0, 8),
        ) {
            let a = Matrix::new(2, 3, ad).unwrap();
            let b = Matrix::new(3, 4, bd).unwrap();
            let c = Matrix::new(4, 2, cd).unwrap();
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                let scale = x.abs().max(y.abs()).max(1.0);
                prop_assert!((x - y).abs() / scale <= 1e-9);
            }
        }
    }
}
