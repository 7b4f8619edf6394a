//! Benchmark fixtures shared by the criterion targets.

use cdekf_core::{LowerTriangular, Matrix};

/// A deterministic well-conditioned `rows x cols` pre-array.
pub fn pre_array(rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |i, j| {
        let base = ((i * 7 + j * 13) % 17) as f64 / 17.0 - 0.5;
        if i == j { 2.0 + base } else { base }
    })
}

/// A lower factor with a dominant diagonal.
pub fn factor(n: usize) -> LowerTriangular {
    LowerTriangular::from_tril(&pre_array(n, n))
}
