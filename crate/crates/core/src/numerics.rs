//! Dense real linear algebra, seeded randomness and the orthogonality tools
//! shared by every other module.
//!
//! Everything is `f64`. Matrices are row-major; a column vector is a matrix
//! with one column. Products go through `matrixmultiply`'s blocked kernels,
//! which handle transposed operands through strides rather than copies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("matrix entries must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
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

    /// Builds a matrix from equally sized rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Self {
        Self::from_fn(rows, cols, |_, _| std * rng.normal())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
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

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col_to_vec(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(s);
        m
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `‖MᵀM − I‖_max`.
    pub fn orthogonality_error(&self) -> f64 {
        let mut gram = Matrix::zeros(self.cols, self.cols);
        gemm_into(1.0, self, true, self, false, 0.0, &mut gram);
        for i in 0..self.cols {
            gram.data[i * self.cols + i] -= 1.0;
        }
        gram.max_abs()
    }

    pub fn pow(&self, mut e: u64) -> Result<Matrix> {
        if self.rows != self.cols {
            return Err(Error::DimensionMismatch {
                op: "pow",
                lhs: self.shape(),
                rhs: self.shape(),
            });
        }
        let mut base = self.clone();
        let mut acc = Matrix::identity(self.rows);
        while e > 0 {
            if e & 1 == 1 {
                acc = gemm(&acc, &base)?;
            }
            e >>= 1;
            if e > 0 {
                base = gemm(&base, &base)?;
            }
        }
        Ok(acc)
    }
}

/// Exact dense product `A·B`; matrix–vector is the `B.cols() == 1` case.
pub fn gemm(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            op: "gemm",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm_into(1.0, a, false, b, false, 0.0, &mut c);
    Ok(c)
}

/// `C ← alpha·op(A)·op(B) + beta·C`, where `op` optionally transposes.
///
/// Panics on shape mismatch; this is the hot path used by the models, whose
/// shapes are validated once up front.
pub fn gemm_into(
    alpha: f64,
    a: &Matrix,
    trans_a: bool,
    b: &Matrix,
    trans_b: bool,
    beta: f64,
    c: &mut Matrix,
) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm_into inner dimension mismatch");
    assert_eq!((c.rows, c.cols), (m, n), "gemm_into output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale(beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, a.cols) } else { (a.cols, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols) } else { (b.cols, 1) };
    // SAFETY: strides describe the row-major buffers owned by `a`, `b`, `c`,
    // whose lengths were checked against (m, k, n) above. `c` is borrowed
    // mutably, so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Block-diagonal "clock" matrix made of 2×2 rotations.
///
/// Block `j` is `[[cos θ, sin θ], [−sin θ, cos θ]]` with
/// `θ = 2·phases[j]·π / period`, so every block returns to the identity after
/// `period` steps.
pub fn block_rotation(phases: &[u32], period: u32) -> Result<Matrix> {
    if phases.is_empty() {
        return Err(invalid("block_rotation needs at least one phase"));
    }
    if period == 0 {
        return Err(invalid("block_rotation period must be >= 1"));
    }
    if let Some(bad) = phases.iter().find(|&&l| l == 0 || l > period) {
        return Err(invalid(format!(
            "phase {bad} outside 1..={period}"
        )));
    }
    let n = 2 * phases.len();
    let mut q = Matrix::zeros(n, n);
    for (j, &l) in phases.iter().enumerate() {
        let theta = 2.0 * l as f64 * std::f64::consts::PI / period as f64;
        let (s, c) = theta.sin_cos();
        let r = 2 * j;
        q.set(r, r, c);
        q.set(r, r + 1, s);
        q.set(r + 1, r, -s);
        q.set(r + 1, r + 1, c);
    }
    Ok(q)
}

const POLAR_MAX_ITERS: usize = 80;

/// Orthogonal polar factor of a square full-rank matrix (all singular values
/// set to one), computed by Newton–Schulz iteration
/// `X ← X(3I − XᵀX)/2` after scaling by the spectral norm.
///
/// Small singular values grow by a factor 1.5 per sweep, so the iteration
/// budget bounds the condition number it accepts (~1e−12 relative). Inputs
/// that do not converge are reported as rank deficient.
pub fn nearest_orthogonal(m: &Matrix) -> Result<Matrix> {
    if m.rows != m.cols {
        return Err(Error::DimensionMismatch {
            op: "nearest_orthogonal",
            lhs: m.shape(),
            rhs: m.shape(),
        });
    }
    let n = m.rows;
    let norm = spectral_norm(m, 60);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::RankDeficient(0.0));
    }
    // Power iteration can underestimate slightly; the iteration converges for
    // singular values below sqrt(3), so a small margin is plenty.
    let mut x = m.scaled(1.0 / (norm * 1.0001));
    let mut gram = Matrix::zeros(n, n);
    let mut next = Matrix::zeros(n, n);
    let mut prev_err = f64::INFINITY;
    for _ in 0..POLAR_MAX_ITERS {
        gemm_into(1.0, &x, true, &x, false, 0.0, &mut gram);
        let mut err = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((gram.get(i, j) - target).abs());
            }
        }
        if err < 1e-13 || (err < 1e-10 && err > 0.5 * prev_err) {
            return Ok(x);
        }
        prev_err = err;
        // next = X(3I − G)/2 = 1.5·X − 0.5·X·G
        next.as_mut_slice().copy_from_slice(x.as_slice());
        gemm_into(-0.5, &x, false, &gram, false, 1.5, &mut next);
        std::mem::swap(&mut x, &mut next);
    }
    Err(Error::RankDeficient(smallest_gram_eigen_guess(&x)))
}

// Smallest diagonal of XᵀX after a failed polar iteration; only used to give
// the error message a rough scale.
fn smallest_gram_eigen_guess(x: &Matrix) -> f64 {
    let mut gram = Matrix::zeros(x.cols, x.cols);
    gemm_into(1.0, x, true, x, false, 0.0, &mut gram);
    (0..x.cols)
        .map(|i| gram.get(i, i).max(0.0).sqrt())
        .fold(f64::INFINITY, f64::min)
}

/// Power-iteration estimate of the largest singular value.
///
/// Iterates on `MᵀM` from a fixed pseudo-random start vector, so the result is
/// deterministic. A zero matrix yields `0.0`.
pub fn spectral_norm(m: &Matrix, iters: usize) -> f64 {
    let n = m.cols;
    if n == 0 || m.rows == 0 {
        return 0.0;
    }
    let mut rng = SeededRng::new(0x5eed_5eed, 0);
    let mut v = Matrix::from_fn(n, 1, |_, _| rng.normal());
    let mut mv = Matrix::zeros(m.rows, 1);
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        let norm = v.frobenius();
        if norm == 0.0 {
            return 0.0;
        }
        v.scale(1.0 / norm);
        gemm_into(1.0, m, false, &v, false, 0.0, &mut mv);
        sigma = mv.frobenius();
        if sigma == 0.0 {
            return 0.0;
        }
        gemm_into(1.0, m, true, &mv, false, 0.0, &mut v);
    }
    sigma
}

/// ChaCha8-based generator addressed by `(seed, stream)`.
///
/// Identical pairs reproduce identical draws; distinct streams are
/// independent. [`SeededRng::substream`] derives child streams
/// deterministically so per-trial and per-thread generators never collide.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Fresh generator on a stream derived from this one and `tag`.
    pub fn substream(&self, tag: u64) -> SeededRng {
        SeededRng::new(self.seed, splitmix64(self.stream ^ splitmix64(tag)))
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        self.inner.random_range(lo..=hi)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `n` points drawn uniformly from the unit sphere in `dim` dimensions
/// (Gaussian draw, then normalized).
pub fn sample_unit_sphere(dim: usize, n: usize, rng: &mut SeededRng) -> Result<Vec<Vec<f64>>> {
    if dim == 0 {
        return Err(invalid("sample_unit_sphere requires dim >= 1"));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-300 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
