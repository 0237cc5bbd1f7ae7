//! Dense linear algebra used by every other module.
//!
//! Storage is row-major `f64`. All reductions run left to right over the
//! inner index so results are bit-reproducible for identical inputs.

use std::fmt;
use std::ops::{Deref, DerefMut, Index, IndexMut};

use crate::error::{Error, Result};

/// Relative tolerance for the power-iteration stopping rule.
pub const POWER_ITERATION_TOL: f64 = 1e-12;
/// Iteration cap for power and inverse-power iteration.
pub const POWER_ITERATION_MAX_ITERS: usize = 100_000;
/// Absolute tolerance used when checking symmetry.
pub const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "from_vec",
                format!("{} entries for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(
                    "from_rows",
                    format!("row {i} has {} entries, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(DenseMatrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    /// Matrix product `self * rhs`.
    pub fn matmul(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = DenseMatrix::zeros(self.rows, rhs.cols);
        self.matmul_into(rhs, &mut out)?;
        Ok(out)
    }

    /// Writes `self * rhs` into `out`, which must already have the product shape.
    ///
    /// Each output entry is accumulated over the inner index in increasing
    /// order. Zero entries of `self` are skipped, which leaves the result
    /// unchanged and keeps sparse mixing matrices cheap.
    pub fn matmul_into(&self, rhs: &DenseMatrix, out: &mut DenseMatrix) -> Result<()> {
        if self.cols != rhs.rows {
            return Err(Error::dim(
                "matmul",
                format!(
                    "{}x{} times {}x{}",
                    self.rows, self.cols, rhs.rows, rhs.cols
                ),
            ));
        }
        if out.rows != self.rows || out.cols != rhs.cols {
            return Err(Error::dim(
                "matmul",
                format!(
                    "output is {}x{}, expected {}x{}",
                    out.rows, out.cols, self.rows, rhs.cols
                ),
            ));
        }
        out.data.iter_mut().for_each(|v| *v = 0.0);
        let n = rhs.cols;
        for i in 0..self.rows {
            let lhs_row = &self.data[i * self.cols..(i + 1) * self.cols];
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (k, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(())
    }

    pub fn matvec(&self, x: &[f64]) -> Result<DenseVector> {
        if x.len() != self.cols {
            return Err(Error::dim(
                "matvec",
                format!("{}x{} times vector of length {}", self.rows, self.cols, x.len()),
            ));
        }
        Ok(DenseVector(
            (0..self.rows).map(|r| dot(self.row(r), x)).collect(),
        ))
    }

    /// `selfᵀ * self`, accumulated row by row and skipping zero entries.
    pub fn gram(&self) -> DenseMatrix {
        let n = self.cols;
        let mut g = DenseMatrix::zeros(n, n);
        for r in 0..self.rows {
            let row = self.row(r);
            for (i, &a) in row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let g_row = &mut g.data[i * n..(i + 1) * n];
                for (gv, &b) in g_row.iter_mut().zip(row) {
                    *gv += a * b;
                }
            }
        }
        g
    }

    pub fn scale(&self, c: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(
        &self,
        other: &DenseMatrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dim(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        Ok(DenseMatrix {
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

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(r)) {
                *s += v;
            }
        }
        sums
    }

    /// Squared Frobenius norm.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Largest `|S_ij - S_ji|`, or `None` for a non-square matrix.
    pub fn asymmetry(&self) -> Option<(usize, usize, f64)> {
        if !self.is_square() {
            return None;
        }
        let mut worst = (0, 0, 0.0);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let gap = (self[(i, j)] - self[(j, i)]).abs();
                if gap > worst.2 {
                    worst = (i, j, gap);
                }
            }
        }
        Some(worst)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        matches!(self.asymmetry(), Some((_, _, gap)) if gap <= tol)
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Owned real vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseVector(pub Vec<f64>);

impl DenseVector {
    pub fn zeros(dim: usize) -> Self {
        DenseVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for DenseVector {
    fn from(v: Vec<f64>) -> Self {
        DenseVector(v)
    }
}

impl Deref for DenseVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for DenseVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: DenseMatrix,
}

impl Cholesky {
    /// Factors `a`. Only the lower triangle is read.
    pub fn factor(a: &DenseMatrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::dim(
                "cholesky",
                format!("{}x{} is not square", a.rows(), a.cols()),
            ));
        }
        let n = a.rows();
        let mut l = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let mut diag = a[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    row: j,
                    pivot: diag,
                });
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
        Ok(Cholesky { lower: l })
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    pub fn solve(&self, b: &[f64]) -> Result<DenseVector> {
        let n = self.dim();
        if b.len() != n {
            return Err(Error::dim(
                "cholesky_solve",
                format!("rhs of length {} for a {n}x{n} system", b.len()),
            ));
        }
        let l = &self.lower;
        // forward: L w = b
        let mut w = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= l[(i, k)] * w[k];
            }
            w[i] = s / l[(i, i)];
        }
        // backward: Lᵀ x = w
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = w[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
        Ok(DenseVector(x))
    }
}

/// Solves `A x = b` for symmetric positive definite `A` by Cholesky factorization.
pub fn solve_spd(a: &DenseMatrix, b: &[f64]) -> Result<DenseVector> {
    Cholesky::factor(a)?.solve(b)
}

/// Outcome of an iterative eigenvalue computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenEstimate {
    pub value: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit; `value` is then the last iterate.
    pub converged: bool,
}

/// Deterministic power-iteration start vector.
///
/// Not the all-ones vector: every `Wᵀ(I-J)W` with doubly stochastic `W` has
/// the all-ones vector in its kernel, so starting there would always return 0.
fn start_vector(n: usize) -> Vec<f64> {
    const GOLDEN: f64 = 0.618_033_988_749_894_9;
    let mut v: Vec<f64> = (0..n)
        .map(|k| 0.5 + ((k as f64 + 1.0) * GOLDEN).fract())
        .collect();
    let nrm = norm(&v);
    v.iter_mut().for_each(|x| *x /= nrm);
    v
}

fn check_symmetric(s: &DenseMatrix) -> Result<()> {
    match s.asymmetry() {
        None => Err(Error::dim(
            "spectral_radius_symmetric",
            format!("{}x{} is not square", s.rows(), s.cols()),
        )),
        Some((row, col, gap)) if gap > SYMMETRY_TOL => {
            Err(Error::NotSymmetric { row, col, gap })
        }
        Some(_) => Ok(()),
    }
}

/// Runs power iteration with `apply` and returns the growth factor `‖Av‖`
/// for unit `v`, which converges to the largest absolute eigenvalue of a
/// symmetric operator, including when `±ρ` are both eigenvalues.
fn power_iterate(n: usize, mut apply: impl FnMut(&[f64], &mut [f64])) -> EigenEstimate {
    if n == 0 {
        return EigenEstimate {
            value: 0.0,
            iterations: 0,
            converged: true,
        };
    }
    let mut v = start_vector(n);
    let mut w = vec![0.0; n];
    let mut estimate = 0.0;
    let mut last_change = f64::INFINITY;
    for it in 1..=POWER_ITERATION_MAX_ITERS {
        apply(&v, &mut w);
        let growth = norm(&w);
        if growth == 0.0 {
            return EigenEstimate {
                value: 0.0,
                iterations: it,
                converged: true,
            };
        }
        if it > 1 {
            let change = (growth - estimate).abs();
            let tol = POWER_ITERATION_TOL * growth;
            // The error of a linearly converging sequence is about
            // change * q / (1 - q) with q the observed contraction ratio.
            let q = change / last_change;
            let tail_ok = q < 1.0 && change * q / (1.0 - q) <= tol;
            if change <= 4.0 * f64::EPSILON * growth || (change <= tol && tail_ok) {
                return EigenEstimate {
                    value: growth,
                    iterations: it,
                    converged: true,
                };
            }
            last_change = change;
        }
        estimate = growth;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / growth;
        }
    }
    // Rayleigh quotient of the final iterate.
    apply(&v, &mut w);
    EigenEstimate {
        value: dot(&v, &w).abs(),
        iterations: POWER_ITERATION_MAX_ITERS,
        converged: false,
    }
}

/// Largest absolute eigenvalue of a symmetric matrix by power iteration.
pub fn spectral_radius_symmetric(s: &DenseMatrix) -> Result<EigenEstimate> {
    check_symmetric(s)?;
    Ok(power_iterate(s.rows(), |v, w| {
        for (r, wr) in w.iter_mut().enumerate() {
            *wr = dot(s.row(r), v);
        }
    }))
}

/// Smallest eigenvalue of a symmetric positive definite matrix by inverse
/// power iteration on a Cholesky factorization.
pub fn smallest_eigenvalue_spd(s: &DenseMatrix) -> Result<EigenEstimate> {
    check_symmetric(s)?;
    let chol = Cholesky::factor(s)?;
    let est = power_iterate(s.rows(), |v, w| {
        let x = chol.solve(v).expect("dimension checked above");
        w.copy_from_slice(&x);
    });
    Ok(EigenEstimate {
        value: if est.value > 0.0 { 1.0 / est.value } else { 0.0 },
        ..est
    })
}
