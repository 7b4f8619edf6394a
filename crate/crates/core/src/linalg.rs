//! Dense column-major matrix kernels.
//!
//! Everything the estimators need lives here: lower Cholesky factorization,
//! orthogonal (Householder) triangularization of pre-arrays, triangular
//! solves, the `phi` operator used when differentiating a Cholesky factor,
//! and a small LU factorization for the implicit integrator.
//!
//! Matrices are stored column by column, so [`Matrix::as_slice`] is the
//! flattened `A(:)` vector and [`Matrix::from_col_major`] is its inverse.
//! No routine in this crate forms an explicit inverse.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Sub};

use thiserror::Error;

/// Diagonal entries of an orthogonal-transform factor below this are treated as zero.
pub const RANK_THRESHOLD: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("pre-array is rank deficient (diagonal {index})")]
    RankDeficient { index: usize },
    #[error("triangular factor is singular (diagonal {index})")]
    SingularFactor { index: usize },
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("non-finite entry encountered")]
    NonFinite,
}

/// Dense real matrix in column-major order.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Rebuilds a matrix from its column-major flattening.
    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch {
                expected: (rows, cols),
                found: (data.len(), 1),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut m = Matrix::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c, "ragged row {i}");
            for (j, &v) in row.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                m.data[i + j * rows] = f(i, j);
            }
        }
        m
    }

    /// Single-column matrix.
    pub fn column_vector(v: &[f64]) -> Self {
        Matrix {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Column-major flattening (`A(:)`).
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        (i < self.rows && j < self.cols).then(|| self.data[i + j * self.rows])
    }

    pub fn column(&self, j: usize) -> &[f64] {
        assert!(j < self.cols, "column {j} out of bounds for {} columns", self.cols);
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn column_mut(&mut self, j: usize) -> &mut [f64] {
        assert!(j < self.cols, "column {j} out of bounds for {} columns", self.cols);
        &mut self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.cols).map(|j| self[(i, j)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "mul_vec dimension mismatch");
        let mut out = vec![0.0; self.rows];
        for (j, &vj) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.column(j)) {
                *o += a * vj;
            }
        }
        out
    }

    /// `self * other^T` without materializing the transpose.
    pub fn mul_transpose(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "mul_transpose dimension mismatch");
        Matrix::from_fn(self.rows, other.rows, |i, j| {
            (0..self.cols).map(|k| self[(i, k)] * other[(j, k)]).sum()
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lower triangle including the diagonal.
    pub fn tril(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| if i >= j { self[(i, j)] } else { 0.0 })
    }

    /// Largest magnitude strictly above the diagonal.
    pub fn strict_upper_max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for j in 0..self.cols {
            for i in 0..j.min(self.rows) {
                m = m.max(self[(i, j)].abs());
            }
        }
        m
    }

    /// Replaces the matrix by `(A + A^T) / 2`.
    pub fn symmetrize(&mut self) {
        assert!(self.is_square(), "symmetrize needs a square matrix");
        let n = self.rows;
        for j in 0..n {
            for i in (j + 1)..n {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = avg;
                self[(j, i)] = avg;
            }
        }
    }

    /// Horizontal concatenation `[self other]`.
    pub fn hcat(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "hcat row mismatch");
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Matrix {
            rows: self.rows,
            cols: self.cols + other.cols,
            data,
        }
    }

    /// Vertical concatenation `[self; other]`.
    pub fn vcat(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "vcat column mismatch");
        Matrix::from_fn(self.rows + other.rows, self.cols, |i, j| {
            if i < self.rows {
                self[(i, j)]
            } else {
                other[(i - self.rows, j)]
            }
        })
    }

    /// Copies the `rows x cols` block starting at `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols, "block out of bounds");
        Matrix::from_fn(rows, cols, |i, j| self[(r0 + i, c0 + j)])
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        assert!(
            i < self.rows && j < self.cols,
            "index ({i}, {j}) out of bounds for {}x{}",
            self.rows,
            self.cols
        );
        &self.data[i + j * self.rows]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        assert!(
            i < self.rows && j < self.cols,
            "index ({i}, {j}) out of bounds for {}x{}",
            self.rows,
            self.cols
        );
        &mut self.data[i + j * self.rows]
    }
}

impl Mul for &Matrix {
    type Output = Matrix;

    fn mul(self, rhs: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, rhs.rows,
            "cannot multiply {}x{} by {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for j in 0..rhs.cols {
            for k in 0..self.cols {
                let b = rhs[(k, j)];
                if b == 0.0 {
                    continue;
                }
                let a_col = self.column(k);
                let o_col = out.column_mut(j);
                for (o, &a) in o_col.iter_mut().zip(a_col) {
                    *o += a * b;
                }
            }
        }
        out
    }
}

impl Add for &Matrix {
    type Output = Matrix;

    fn add(self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &Matrix {
    type Output = Matrix;

    fn sub(self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.shape(), rhs.shape(), "sub shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, "  ")?;
            for j in 0..self.cols {
                write!(f, "{:>14.6e}", self[(i, j)])?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

/// Square lower-triangular matrix; entries above the diagonal are exactly zero.
#[derive(Clone, PartialEq, Debug)]
pub struct LowerTriangular(Matrix);

impl LowerTriangular {
    /// Keeps the lower triangle of `m`, discarding anything above the diagonal.
    pub fn from_tril(m: &Matrix) -> Self {
        assert!(m.is_square(), "lower-triangular factor must be square");
        LowerTriangular(m.tril())
    }

    /// Accepts `m` only if it is square with an exactly zero strict upper part.
    pub fn try_from_matrix(m: Matrix) -> Result<Self, LinalgError> {
        if !m.is_square() {
            return Err(LinalgError::DimensionMismatch {
                expected: (m.rows, m.rows),
                found: m.shape(),
            });
        }
        if m.strict_upper_max_abs() != 0.0 {
            return Err(LinalgError::DimensionMismatch {
                expected: m.shape(),
                found: m.shape(),
            });
        }
        Ok(LowerTriangular(m))
    }

    pub fn identity(n: usize) -> Self {
        LowerTriangular(Matrix::identity(n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        LowerTriangular(Matrix::from_diagonal(diag))
    }

    pub fn order(&self) -> usize {
        self.0.rows
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.0.diagonal()
    }

    /// `L L^T`.
    pub fn gram(&self) -> Matrix {
        self.0.mul_transpose(&self.0)
    }

    /// Flips column signs so every diagonal entry is nonnegative; `L L^T` is unchanged.
    pub fn normalize_signs(&mut self) {
        let n = self.order();
        for j in 0..n {
            if self.0[(j, j)] < 0.0 {
                for v in self.0.column_mut(j) {
                    *v = -*v;
                }
            }
        }
    }
}

impl Index<(usize, usize)> for LowerTriangular {
    type Output = f64;

    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

/// Lower Cholesky factor `S` with `S S^T = a`. Only the lower triangle of `a` is read.
pub fn cholesky_lower(a: &Matrix) -> Result<LowerTriangular, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::DimensionMismatch {
            expected: (a.rows, a.rows),
            found: a.shape(),
        });
    }
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { pivot: j });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(LowerTriangular(l))
}

/// Lower-triangularizes an `n x m` pre-array (`m >= n`) by Householder reflections
/// applied from the right, returning `L` with `L L^T = pre pre^T` and a nonnegative diagonal.
pub fn triangularize_lower(pre: &Matrix) -> Result<LowerTriangular, LinalgError> {
    let (n, m) = pre.shape();
    if n == 0 || m < n {
        return Err(LinalgError::DimensionMismatch {
            expected: (n, n.max(1)),
            found: (n, m),
        });
    }
    if !pre.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let mut a = pre.clone();
    let mut v = vec![0.0; m];
    for i in 0..n {
        // Reflect row i onto e_i over columns i..m.
        let norm = (i..m).map(|j| a[(i, j)] * a[(i, j)]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = a[(i, i)];
        let alpha = if x0 >= 0.0 { -norm } else { norm };
        v[i] = x0 - alpha;
        for j in (i + 1)..m {
            v[j] = a[(i, j)];
        }
        let vnorm2: f64 = (i..m).map(|j| v[j] * v[j]).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        let beta = 2.0 / vnorm2;
        for r in i..n {
            let dot: f64 = (i..m).map(|j| a[(r, j)] * v[j]).sum();
            let s = beta * dot;
            for j in i..m {
                a[(r, j)] -= s * v[j];
            }
        }
        a[(i, i)] = alpha;
        for j in (i + 1)..m {
            a[(i, j)] = 0.0;
        }
    }
    let mut l = LowerTriangular(a.block(0, 0, n, n).tril());
    l.normalize_signs();
    if let Some(index) = l.diagonal().iter().position(|d| !(d.abs() >= RANK_THRESHOLD)) {
        return Err(LinalgError::RankDeficient { index });
    }
    Ok(l)
}

/// Post-array blocks of the joint measurement-update triangularization.
#[derive(Debug, Clone)]
pub struct BlockPostArray {
    pub re_sqrt: LowerTriangular,
    pub pxz_bar: Matrix,
    pub p_sqrt: LowerTriangular,
}

/// Triangularizes `[[z_block, r_sqrt], [x_block, 0]]` and reads off the three post-array blocks.
pub fn block_triangularize(
    z_block: &Matrix,
    x_block: &Matrix,
    r_sqrt: &LowerTriangular,
) -> Result<BlockPostArray, LinalgError> {
    let (m, n) = z_block.shape();
    if x_block.shape() != (n, n) || r_sqrt.order() != m {
        return Err(LinalgError::DimensionMismatch {
            expected: (n, n),
            found: x_block.shape(),
        });
    }
    let top = z_block.hcat(r_sqrt.as_matrix());
    let bottom = x_block.hcat(&Matrix::zeros(n, m));
    let post = triangularize_lower(&top.vcat(&bottom))?;
    let post = post.as_matrix();
    Ok(BlockPostArray {
        re_sqrt: LowerTriangular(post.block(0, 0, m, m)),
        pxz_bar: post.block(m, 0, n, m),
        p_sqrt: LowerTriangular(post.block(m, m, n, n)),
    })
}

/// Strictly-lower part plus half the diagonal.
pub fn phi(a: &Matrix) -> LowerTriangular {
    assert!(a.is_square(), "phi needs a square matrix");
    let n = a.rows;
    LowerTriangular(Matrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => a[(i, j)],
        std::cmp::Ordering::Equal => 0.5 * a[(i, j)],
        std::cmp::Ordering::Less => 0.0,
    }))
}

fn check_factor(l: &LowerTriangular) -> Result<(), LinalgError> {
    match l.diagonal().iter().position(|d| *d == 0.0 || !d.is_finite()) {
        Some(index) => Err(LinalgError::SingularFactor { index }),
        None => Ok(()),
    }
}

/// Solves `L X = B` by forward substitution.
pub fn solve_lower(l: &LowerTriangular, b: &Matrix) -> Result<Matrix, LinalgError> {
    let n = l.order();
    if b.rows != n {
        return Err(LinalgError::DimensionMismatch {
            expected: (n, b.cols),
            found: b.shape(),
        });
    }
    check_factor(l)?;
    let mut x = b.clone();
    for c in 0..b.cols {
        let col = x.column_mut(c);
        for i in 0..n {
            let mut s = col[i];
            for k in 0..i {
                s -= l[(i, k)] * col[k];
            }
            col[i] = s / l[(i, i)];
        }
    }
    Ok(x)
}

/// Solves `L^T X = B` by back substitution (the upper-triangular analogue).
pub fn solve_lower_transpose(l: &LowerTriangular, b: &Matrix) -> Result<Matrix, LinalgError> {
    let n = l.order();
    if b.rows != n {
        return Err(LinalgError::DimensionMismatch {
            expected: (n, b.cols),
            found: b.shape(),
        });
    }
    check_factor(l)?;
    let mut x = b.clone();
    for c in 0..b.cols {
        let col = x.column_mut(c);
        for i in (0..n).rev() {
            let mut s = col[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * col[k];
            }
            col[i] = s / l[(i, i)];
        }
    }
    Ok(x)
}

/// Right division `B L^{-1}`, i.e. solves `X L = B`.
pub fn solve_right_lower(b: &Matrix, l: &LowerTriangular) -> Result<Matrix, LinalgError> {
    Ok(solve_lower_transpose(l, &b.transpose())?.transpose())
}

/// Right division `B L^{-T}`, i.e. solves `X L^T = B`.
pub fn solve_right_lower_transpose(b: &Matrix, l: &LowerTriangular) -> Result<Matrix, LinalgError> {
    Ok(solve_lower(l, &b.transpose())?.transpose())
}

/// LU factorization with partial pivoting.
#[derive(Debug, Clone)]
pub struct LuFactors {
    lu: Matrix,
    perm: Vec<usize>,
}

impl LuFactors {
    pub fn new(a: &Matrix) -> Result<Self, LinalgError> {
        if !a.is_square() {
            return Err(LinalgError::DimensionMismatch {
                expected: (a.rows, a.rows),
                found: a.shape(),
            });
        }
        let n = a.rows;
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu[(i, k)].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if !(pmax > 0.0) || !pmax.is_finite() {
                return Err(LinalgError::SingularFactor { index: k });
            }
            if p != k {
                perm.swap(p, k);
                for j in 0..n {
                    let tmp = lu[(k, j)];
                    lu[(k, j)] = lu[(p, j)];
                    lu[(p, j)] = tmp;
                }
            }
            let pivot = lu[(k, k)];
            for i in (k + 1)..n {
                let f = lu[(i, k)] / pivot;
                lu[(i, k)] = f;
                if f != 0.0 {
                    for j in (k + 1)..n {
                        let u = lu[(k, j)];
                        lu[(i, j)] -= f * u;
                    }
                }
            }
        }
        Ok(LuFactors { lu, perm })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows;
        assert_eq!(b.len(), n, "LU solve dimension mismatch");
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for k in 0..i {
                x[i] -= self.lu[(i, k)] * x[k];
            }
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                x[i] -= self.lu[(i, k)] * x[k];
            }
            x[i] /= self.lu[(i, i)];
        }
        x
    }
}
