//! Dense row-major f64 tensors and the raw (non-differentiable) kernels
//! backing the tape operations.

use crate::error::{Error, Result};

/// Dense tensor of 64-bit floats, row-major.
///
/// Invariant: `shape.iter().product() == values.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Contract(format!(
                "tensor shape {:?} expects {} values, got {}",
                shape,
                expected,
                values.len()
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![1.0; n],
        }
    }

    pub fn full(shape: &[usize], fill: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![fill; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            values: vec![v],
        }
    }

    /// 1-D tensor from a vector.
    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
        }
    }

    /// 2-D tensor from a flat row-major slice.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    /// 1×C row matrix from a vector.
    pub fn row(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of rows when interpreted as 2-D (a 1-D tensor is one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Number of columns when interpreted as 2-D.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.values[r * cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn first(&self) -> f64 {
        self.values[0]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Elementwise in-place accumulation; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.values.iter_mut().zip(other.values.iter()) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, k: f64) {
        for v in self.values.iter_mut() {
            *v *= k;
        }
    }

    pub fn fill(&mut self, v: f64) {
        for x in self.values.iter_mut() {
            *x = v;
        }
    }

    /// Mean over rows of a 2-D tensor, producing a 1×cols row.
    pub fn mean_rows(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += self.get2(i, j);
            }
        }
        for v in out.iter_mut() {
            *v /= r as f64;
        }
        Tensor::row(out)
    }
}

// ── raw kernels ─────────────────────────────────────────────────────

/// C = A·B for 2-D inputs. Errors when inner dimensions disagree.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (p, q) = (a.rows(), a.cols());
    let (q2, r) = (b.rows(), b.cols());
    if q != q2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let a_row = a.row_slice(i);
        let out_row = &mut out[i * r..(i + 1) * r];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = b.row_slice(k);
            for (o, &bkj) in out_row.iter_mut().zip(b_row.iter()) {
                *o += aik * bkj;
            }
        }
    }
    Tensor::matrix(p, r, out)
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.get2(i, j);
        }
    }
    Tensor::matrix(c, r, out).expect("transpose preserves element count")
}

/// Stable softmax along `axis` of a 2-D tensor with temperature `temp`.
///
/// Per slice: exp((x - max)/temp) / Σ exp((x - max)/temp).
pub fn softmax(x: &Tensor, axis: usize, temp: f64) -> Result<Tensor> {
    if temp <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "softmax temperature must be positive, got {temp}"
        )));
    }
    if axis > 1 {
        return Err(Error::InvalidParameter(format!(
            "softmax axis must be 0 or 1, got {axis}"
        )));
    }
    let (r, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[r, c]);
    let (n_slices, slice_len) = if axis == 0 { (c, r) } else { (r, c) };
    for s in 0..n_slices {
        let idx = |k: usize| if axis == 0 { (k, s) } else { (s, k) };
        let mut max = f64::NEG_INFINITY;
        for k in 0..slice_len {
            let (i, j) = idx(k);
            max = max.max(x.get2(i, j));
        }
        let mut sum = 0.0;
        for k in 0..slice_len {
            let (i, j) = idx(k);
            let e = ((x.get2(i, j) - max) / temp).exp();
            out.set2(i, j, e);
            sum += e;
        }
        for k in 0..slice_len {
            let (i, j) = idx(k);
            let v = out.get2(i, j) / sum;
            out.set2(i, j, v);
        }
    }
    Ok(out)
}

/// Solve A·X = B for X with square A via Gauss-Jordan elimination with
/// partial pivoting. Used for the small alignment systems in the encoders.
pub fn solve_linear(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return Err(Error::ShapeMismatch {
            op: "solve_linear",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let m = b.cols();
    let mut aug = Tensor::zeros(&[n, n + m]);
    for i in 0..n {
        for j in 0..n {
            aug.set2(i, j, a.get2(i, j));
        }
        for j in 0..m {
            aug.set2(i, n + j, b.get2(i, j));
        }
    }
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r1, &r2| {
                aug.get2(r1, col)
                    .abs()
                    .partial_cmp(&aug.get2(r2, col).abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .expect("nonempty range");
        let pivot = aug.get2(pivot_row, col);
        if pivot.abs() < 1e-12 {
            return Err(Error::NumericalFailure(format!(
                "singular system in solve_linear at column {col}"
            )));
        }
        if pivot_row != col {
            for j in 0..n + m {
                let tmp = aug.get2(col, j);
                aug.set2(col, j, aug.get2(pivot_row, j));
                aug.set2(pivot_row, j, tmp);
            }
        }
        let inv = 1.0 / aug.get2(col, col);
        for j in 0..n + m {
            let v = aug.get2(col, j) * inv;
            aug.set2(col, j, v);
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = aug.get2(row, col);
            if factor == 0.0 {
                continue;
            }
            for j in 0..n + m {
                let v = aug.get2(row, j) - factor * aug.get2(col, j);
                aug.set2(row, j, v);
            }
        }
    }
    let mut x = Tensor::zeros(&[n, m]);
    for i in 0..n {
        for j in 0..m {
            x.set2(i, j, aug.get2(i, n + j));
        }
    }
    Ok(x)
}

/// L2 norm of each row; zero rows (norm below `eps`) are reported as 0.
pub const DEGENERATE_NORM_EPS: f64 = 1e-12;

/// Row-wise L2 normalization. Rows with norm below [`DEGENERATE_NORM_EPS`]
/// become the uniform unit vector 1/√cols so the pipeline stays total.
pub fn l2_normalize_rows(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[r, c]);
    let uniform = 1.0 / (c as f64).sqrt();
    for i in 0..r {
        let row = x.row_slice(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < DEGENERATE_NORM_EPS {
            for j in 0..c {
                out.set2(i, j, uniform);
            }
        } else {
            for j in 0..c {
                out.set2(i, j, row[j] / norm);
            }
        }
    }
    out
}
