//! Dense row-major `f64` matrices and the neural operators used by the encoder,
//! each paired with a hand-written backward rule.
//!
//! Every operator here is permutation equivalent: applying it to `P1·A·P2`
//! gives `P1·f(A)·P2`. The property suites in `verify` and the tests below
//! check this elementwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data. Rejects empty shapes, length
    /// mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::shape("Matrix::new", (rows, cols), (data.len(), 1)));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "Matrix::new",
                index,
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// # Panics
    /// If either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Domain("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    /// A 1×n matrix holding `v`.
    pub fn row_vector(v: &[f64]) -> Result<Self> {
        Self::new(1, v.len(), v.to_vec())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    /// Standard product. The inner loop runs over the shared dimension and
    /// accumulates left to right starting from `0.0`, so results are
    /// reproducible bit for bit.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let (n, m, k) = (self.rows, other.cols, self.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let mut acc = 0.0;
                for (t, a) in a_row.iter().enumerate() {
                    acc += a * other.data[t * m + j];
                }
                out[i * m + j] = acc;
            }
        }
        Ok(Matrix {
            rows: n,
            cols: m,
            data: out,
        })
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape("matmul_t", self.shape(), other.shape()));
        }
        self.matmul(&other.transpose())
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape("t_matmul", self.shape(), other.shape()));
        }
        self.transpose().matmul(other)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.same_shape(other, op)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn neg(&self) -> Matrix {
        self.map(|v| -v)
    }

    /// In-place `self += c · other`.
    pub fn axpy(&mut self, c: f64, other: &Matrix) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    /// Adds `v` to every row (bias broadcast).
    pub fn add_row_vector(&self, v: &[f64]) -> Result<Matrix> {
        if v.len() != self.cols {
            return Err(Error::shape("add_row_vector", self.shape(), (1, v.len())));
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(self.cols) {
            for (x, b) in row.iter_mut().zip(v) {
                *x += b;
            }
        }
        Ok(out)
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for row in self.data.chunks_exact(self.cols) {
            for (acc, x) in s.iter_mut().zip(row) {
                *acc += x;
            }
        }
        s
    }

    /// Mean over rows, a length-`cols` vector.
    pub fn mean_rows(&self) -> Vec<f64> {
        let n = self.rows as f64;
        self.col_sums().into_iter().map(|s| s / n).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Columns `start..start + width` as a new matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Result<Matrix> {
        if width == 0 || start + width > self.cols {
            return Err(Error::shape("col_block", self.shape(), (start, width)));
        }
        Ok(Matrix::from_fn(self.rows, width, |i, j| self.get(i, start + j)))
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_col_block(&mut self, start: usize, block: &Matrix) -> Result<()> {
        if block.rows != self.rows || start + block.cols > self.cols {
            return Err(Error::shape("set_col_block", self.shape(), block.shape()));
        }
        for i in 0..block.rows {
            for j in 0..block.cols {
                self.set(i, start + j, block.get(i, j));
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Element-wise activation of the encoder MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn forward(self, x: &Matrix) -> Matrix {
        match self {
            Activation::Relu => relu(x),
            Activation::Tanh => tanh(x),
        }
    }

    /// Derivative evaluated at the pre-activation `x`.
    pub fn derivative(self, x: &Matrix) -> Matrix {
        match self {
            Activation::Relu => relu_grad(x),
            Activation::Tanh => tanh_grad(x),
        }
    }
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Indicator `x > 0`; the subgradient at exactly zero is taken as zero.
pub fn relu_grad(x: &Matrix) -> Matrix {
    x.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

pub fn tanh(x: &Matrix) -> Matrix {
    x.map(f64::tanh)
}

pub fn tanh_grad(x: &Matrix) -> Matrix {
    x.map(|v| {
        let t = v.tanh();
        1.0 - t * t
    })
}

/// Row-wise softmax, stabilised by subtracting each row's maximum.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let cols = x.cols();
    for row in out.data.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Backward of [`softmax_rows`] given its output `s` and the upstream gradient.
/// Per row: `out_ij = s_ij · (g_ij − Σ_k g_ik s_ik)`.
pub fn softmax_rows_backward(s: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    s.same_shape(upstream, "softmax_rows_backward")?;
    let cols = s.cols();
    let mut out = Matrix::zeros(s.rows(), cols);
    for i in 0..s.rows() {
        let srow = s.row(i);
        let total: f64 = srow.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "softmax row {i} sums to {total}, expected 1"
            )));
        }
        let grow = upstream.row(i);
        let dot: f64 = grow.iter().zip(srow).map(|(g, s)| g * s).sum();
        for j in 0..cols {
            out.data[i * cols + j] = srow[j] * (grow[j] - dot);
        }
    }
    Ok(out)
}

/// Intermediates of [`layernorm_rows`] needed by its backward.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

/// Per row: `(x − mean) / sqrt(var + eps) · gamma + beta`, population variance.
pub fn layernorm_rows(
    x: &Matrix,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Matrix, LayerNormCache)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape("layernorm_rows", x.shape(), (gamma.len(), beta.len())));
    }
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("layer norm eps must be positive, got {eps}")));
    }
    let mut normalized = Matrix::zeros(x.rows(), d);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        inv_std.push(r);
        for j in 0..d {
            let xh = (row[j] - mean) * r;
            normalized.data[i * d + j] = xh;
            out.data[i * d + j] = xh * gamma[j] + beta[j];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Gradients of [`layernorm_rows`]: `(d_x, d_gamma, d_beta)`.
pub fn layernorm_rows_backward(
    cache: &LayerNormCache,
    gamma: &[f64],
    upstream: &Matrix,
) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    let xh = &cache.normalized;
    xh.same_shape(upstream, "layernorm_rows_backward")?;
    let d = xh.cols();
    if gamma.len() != d {
        return Err(Error::shape("layernorm_rows_backward", xh.shape(), (1, gamma.len())));
    }
    let mut d_gamma = vec![0.0; d];
    let mut d_beta = vec![0.0; d];
    let mut dx = Matrix::zeros(xh.rows(), d);
    let n = d as f64;
    for i in 0..xh.rows() {
        let g = upstream.row(i);
        let h = xh.row(i);
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for j in 0..d {
            d_gamma[j] += g[j] * h[j];
            d_beta[j] += g[j];
            let dxh = g[j] * gamma[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * h[j];
        }
        let r = cache.inv_std[i];
        for j in 0..d {
            let dxh = g[j] * gamma[j];
            dx.data[i * d + j] = r / n * (n * dxh - sum_dxh - h[j] * sum_dxh_xh);
        }
    }
    Ok((dx, d_gamma, d_beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff_matrix, rel_err};
    use crate::permutation::Permutation;
    use crate::rngs::{random_matrix, substream};

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_small_cases() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(a.matmul(&Matrix::identity(2)).unwrap(), a);
        let b = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(a.matmul(&b).unwrap(), m(&[&[19.0, 22.0], &[43.0, 50.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = substream(7, "tensor-test");
        let a = random_matrix(&mut rng, 7, 5, 1.0);
        let b = random_matrix(&mut rng, 5, 3, 1.0);
        let got = a.matmul(&b).unwrap();
        let want = naive_matmul(&a, &b);
        for (x, y) in got.data().iter().zip(want.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = Matrix::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(0, 2, vec![]).is_err());
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn elementwise_identities() {
        let mut rng = substream(1, "tensor-test");
        let a = random_matrix(&mut rng, 4, 3, 2.0);
        assert_eq!(a.hadamard(&Matrix::filled(4, 3, 1.0)).unwrap(), a);
        assert_eq!(a.add(&a.neg()).unwrap(), Matrix::zeros(4, 3));
        assert!(a.add(&Matrix::zeros(3, 4)).is_err());
        assert!(a.sub(&Matrix::zeros(3, 4)).is_err());
        assert!(a.hadamard(&Matrix::zeros(3, 4)).is_err());
    }

    #[test]
    fn hadamard_is_permutation_equivalent() {
        let mut rng = substream(2, "tensor-test");
        let a = random_matrix(&mut rng, 4, 3, 2.0);
        let b = random_matrix(&mut rng, 4, 3, 2.0);
        let p1 = Permutation::sample(4, &mut rng).unwrap();
        let p2 = Permutation::sample(3, &mut rng).unwrap();
        let both = |x: &Matrix| p1.apply_rows(&p2.apply_cols(x).unwrap()).unwrap();
        let lhs = both(&a).hadamard(&both(&b)).unwrap();
        let rhs = both(&a.hadamard(&b).unwrap());
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn relu_and_grad() {
        let x = m(&[&[-1.0, 2.0]]);
        assert_eq!(relu(&x), m(&[&[0.0, 2.0]]));
        assert_eq!(relu_grad(&x), m(&[&[0.0, 1.0]]));
        assert_eq!(relu_grad(&m(&[&[0.0]])), m(&[&[0.0]]));
    }

    #[test]
    fn relu_grad_matches_finite_differences_away_from_zero() {
        let mut rng = substream(3, "tensor-test");
        let x = random_matrix(&mut rng, 3, 4, 2.0).map(|v| if v.abs() < 1e-3 { 0.5 } else { v });
        let probe = random_matrix(&mut rng, 3, 4, 1.0);
        let analytic = relu_grad(&x).hadamard(&probe).unwrap();
        let numeric = central_diff_matrix(&x, 1e-5, |x| relu(x).hadamard(&probe).unwrap().sum());
        assert!(rel_err(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn tanh_grad_matches_finite_differences() {
        let mut rng = substream(4, "tensor-test");
        let x = random_matrix(&mut rng, 3, 4, 2.0);
        let probe = random_matrix(&mut rng, 3, 4, 1.0);
        let analytic = tanh_grad(&x).hadamard(&probe).unwrap();
        let numeric = central_diff_matrix(&x, 1e-6, |x| tanh(x).hadamard(&probe).unwrap().sum());
        assert!(rel_err(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn softmax_closed_forms() {
        let s = softmax_rows(&m(&[&[0.0, 0.0, 0.0]]));
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&m(&[&[2f64.ln(), 0.0]]));
        assert!((s.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        // large logits stay finite
        let s = softmax_rows(&m(&[&[1000.0, 0.0]]));
        assert!(s.is_finite());
    }

    #[test]
    fn softmax_is_permutation_equivalent() {
        let mut rng = substream(5, "tensor-test");
        let x = random_matrix(&mut rng, 4, 4, 2.0);
        let p1 = Permutation::sample(4, &mut rng).unwrap();
        let p2 = Permutation::sample(4, &mut rng).unwrap();
        let both = |x: &Matrix| p1.apply_rows(&p2.apply_cols(x).unwrap()).unwrap();
        let diff = softmax_rows(&both(&x)).max_abs_diff(&both(&softmax_rows(&x))).unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn softmax_backward_edge_cases() {
        let s = softmax_rows(&m(&[&[0.3, -1.0, 2.0], &[0.0, 0.5, 0.1]]));
        let g = m(&[&[4.0, 4.0, 4.0], &[-1.5, -1.5, -1.5]]);
        assert!(softmax_rows_backward(&s, &g).unwrap().max_abs() < 1e-15);

        let sat = m(&[&[1.0, 0.0]]);
        let out = softmax_rows_backward(&sat, &m(&[&[0.7, -3.0]])).unwrap();
        assert_eq!(out, Matrix::zeros(1, 2));

        let bad = m(&[&[0.5, 0.6]]);
        assert!(matches!(
            softmax_rows_backward(&bad, &m(&[&[1.0, 1.0]])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = substream(6, "tensor-test");
        let x = random_matrix(&mut rng, 3, 4, 2.0);
        let probe = random_matrix(&mut rng, 3, 4, 1.0);
        let analytic = softmax_rows_backward(&softmax_rows(&x), &probe).unwrap();
        let numeric = central_diff_matrix(&x, 1e-6, |x| softmax_rows(x).hadamard(&probe).unwrap().sum());
        assert!(rel_err(&analytic, &numeric) < 1e-6);
    }

    #[test]
    fn layernorm_closed_forms() {
        let ones = [1.0, 1.0, 1.0];
        let zeros = [0.0, 0.0, 0.0];
        let (y, _) = layernorm_rows(&m(&[&[2.5, 2.5, 2.5]]), &ones, &zeros, 1e-5).unwrap();
        assert_eq!(y, Matrix::zeros(1, 3));
        let (y, _) = layernorm_rows(&m(&[&[1.0, -1.0]]), &[1.0, 1.0], &[0.0, 0.0], 1e-12).unwrap();
        assert!((y.get(0, 0) - 1.0).abs() < 1e-9 && (y.get(0, 1) + 1.0).abs() < 1e-9);
        assert!(layernorm_rows(&m(&[&[1.0, -1.0]]), &ones, &zeros, 1e-5).is_err());
        assert!(layernorm_rows(&m(&[&[1.0, -1.0]]), &[1.0, 1.0], &[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn layernorm_backward_matches_finite_differences() {
        let mut rng = substream(8, "tensor-test");
        let x = random_matrix(&mut rng, 3, 5, 2.0);
        let gamma: Vec<f64> = random_matrix(&mut rng, 1, 5, 1.0).into_data();
        let beta: Vec<f64> = random_matrix(&mut rng, 1, 5, 1.0).into_data();
        let probe = random_matrix(&mut rng, 3, 5, 1.0);
        let loss = |x: &Matrix, g: &[f64], b: &[f64]| {
            layernorm_rows(x, g, b, 1e-5).unwrap().0.hadamard(&probe).unwrap().sum()
        };
        let (_, cache) = layernorm_rows(&x, &gamma, &beta, 1e-5).unwrap();
        let (dx, dg, db) = layernorm_rows_backward(&cache, &gamma, &probe).unwrap();

        let ndx = central_diff_matrix(&x, 1e-6, |x| loss(x, &gamma, &beta));
        assert!(rel_err(&dx, &ndx) < 1e-5);
        let gm = Matrix::row_vector(&gamma).unwrap();
        let ndg = central_diff_matrix(&gm, 1e-6, |g| loss(&x, g.data(), &beta));
        assert!(rel_err(&Matrix::row_vector(&dg).unwrap(), &ndg) < 1e-5);
        let bm = Matrix::row_vector(&beta).unwrap();
        let ndb = central_diff_matrix(&bm, 1e-6, |b| loss(&x, &gamma, b.data()));
        assert!(rel_err(&Matrix::row_vector(&db).unwrap(), &ndb) < 1e-5);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = substream(9, "tensor-test");
        for _ in 0..50 {
            let s = softmax_rows(&random_matrix(&mut rng, 5, 7, 10.0));
            for i in 0..5 {
                assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
