//! Dense linear algebra and the seedable random source shared by both models.
//!
//! Matrices are small (a few hundred rows at most) and stored row-major in a
//! single `Vec<f64>`. Shape errors inside hot loops are programmer errors and
//! panic; the public factorization and solve routines return [`Result`].

use std::ops::{Index, IndexMut};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Jitter values tried in order by [`cholesky`] until the factorization succeeds.
pub const DEFAULT_JITTER_SCHEDULE: [f64; 4] = [0.0, 1e-8, 1e-6, 1e-4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::BadConfig("matrix entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "ragged rows: expected {cols} columns, found {}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// A single-column matrix.
    pub fn column(values: &[f64]) -> Self {
        Self { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: indices.len(), cols: self.cols, data }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Matrix product. Panics on incompatible shapes.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let other_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(other_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// Matrix-vector product. Panics on incompatible shapes.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ · v`.
    pub fn tr_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "tr_matvec shape mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    pub fn add_diagonal(&mut self, value: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += value;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A lower-triangular Cholesky factor together with the jitter that was
/// added to the diagonal to obtain it.
#[derive(Debug, Clone)]
pub struct Cholesky {
    factor: Matrix,
    jitter: f64,
}

impl Cholesky {
    pub fn factor(&self) -> &Matrix {
        &self.factor
    }

    pub fn into_factor(self) -> Matrix {
        self.factor
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.factor.rows
    }

    /// Solves `(a + jitter·I) · X = b`.
    pub fn solve(&self, b: &Matrix) -> Matrix {
        let y = lower_solve(&self.factor, b, false);
        lower_solve(&self.factor, &y, true)
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        forward_subst_in_place(&self.factor, &mut x);
        backward_subst_in_place(&self.factor, &mut x);
        x
    }

    /// `ln det(a + jitter·I)`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.factor[(i, i)].ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> Matrix {
        self.solve(&Matrix::identity(self.dim()))
    }
}

/// Cholesky factorization with an escalating diagonal jitter.
///
/// Each jitter in `jitter_schedule` is tried in turn; the first successful
/// factorization of `a + jitter·I` is returned.
pub fn cholesky(a: &Matrix, jitter_schedule: &[f64]) -> Result<Cholesky> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "cholesky of a {}x{} matrix",
            a.rows, a.cols
        )));
    }
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for i in 0..a.rows {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::BadConfig(format!(
                    "cholesky input is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let mut last = 0.0;
    for (attempt, &jitter) in jitter_schedule.iter().enumerate() {
        last = jitter;
        if let Some(factor) = try_cholesky(a, jitter) {
            if attempt > 0 {
                log::warn!("cholesky needed diagonal jitter {jitter:e}");
            }
            return Ok(Cholesky { factor, jitter });
        }
    }
    Err(Error::NotPositiveDefinite { jitter: last })
}

fn try_cholesky(a: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)] + jitter;
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

/// Solves `l · X = b`, or `lᵀ · X = b` when `transpose` is set, for a
/// lower-triangular `l`. Entries above the diagonal of `l` are ignored.
pub fn tri_solve(l: &Matrix, b: &Matrix, transpose: bool) -> Result<Matrix> {
    if !l.is_square() || l.rows != b.rows {
        return Err(Error::ShapeMismatch(format!(
            "tri_solve of {}x{} against {}x{}",
            l.rows, l.cols, b.rows, b.cols
        )));
    }
    if let Some(index) = (0..l.rows).find(|&i| l[(i, i)] == 0.0) {
        return Err(Error::SingularTriangular { index });
    }
    Ok(lower_solve(l, b, transpose))
}

fn lower_solve(l: &Matrix, b: &Matrix, transpose: bool) -> Matrix {
    let n = l.rows;
    let mut x = b.clone();
    let cols = b.cols;
    if !transpose {
        for i in 0..n {
            for k in 0..i {
                let lik = l[(i, k)];
                if lik != 0.0 {
                    for c in 0..cols {
                        x.data[i * cols + c] -= lik * x.data[k * cols + c];
                    }
                }
            }
            let d = l[(i, i)];
            for c in 0..cols {
                x.data[i * cols + c] /= d;
            }
        }
    } else {
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let lki = l[(k, i)];
                if lki != 0.0 {
                    for c in 0..cols {
                        x.data[i * cols + c] -= lki * x.data[k * cols + c];
                    }
                }
            }
            let d = l[(i, i)];
            for c in 0..cols {
                x.data[i * cols + c] /= d;
            }
        }
    }
    x
}

pub(crate) fn forward_subst_in_place(l: &Matrix, x: &mut [f64]) {
    for i in 0..l.rows {
        let row = l.row(i);
        let s = dot(&row[..i], &x[..i]);
        x[i] = (x[i] - s) / row[i];
    }
}

pub(crate) fn backward_subst_in_place(l: &Matrix, x: &mut [f64]) {
    let n = l.rows;
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
}

/// Seedable random stream. Identical seeds yield identical draw sequences on
/// every platform (ChaCha8 with a fixed 64-bit seed expansion).
#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// An independent stream derived from `seed`, keyed by `stream`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn next_uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.next_uniform()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    /// A uniformly random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }

    /// `k` distinct indices from `0..n`, in random order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// `n` i.i.d. standard-normal draws.
pub fn standard_normal(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.next_normal()).collect()
}
