//! Small dense helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Real, Result};

/// Max absolute entry.
pub fn max_abs<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
}

pub fn vec_max_abs<T: Real>(v: &DVector<T>) -> T {
    v.iter().fold(T::zero(), |acc, x| acc.max(x.abs()))
}

/// Induced infinity norm (max absolute row sum).
pub fn inf_norm<T: Real>(m: &DMatrix<T>) -> T {
    m.row_iter().fold(T::zero(), |acc, row| {
        acc.max(row.iter().fold(T::zero(), |s, v| s + v.abs()))
    })
}

pub fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * T::lit(0.5)
}

pub fn spectral_radius<T: Real>(m: &DMatrix<T>) -> T {
    m.complex_eigenvalues()
        .iter()
        .fold(T::zero(), |acc, c| acc.max(c.norm_sqr().sqrt()))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_sym_eigenvalue<T: Real>(m: &DMatrix<T>) -> T {
    symmetrize(m)
        .symmetric_eigenvalues()
        .iter()
        .fold(T::max_value().unwrap_or_else(|| T::lit(f64::MAX)), |acc, v| acc.min(*v))
}

pub fn is_finite_vec<T: Real>(v: &DVector<T>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Solves a square system by LU with partial pivoting.
pub fn lu_solve<T: Real>(a: &DMatrix<T>, b: &DVector<T>, context: &'static str) -> Result<DVector<T>> {
    a.clone().lu().solve(b).ok_or(Error::Singular(context))
}

pub fn lu_solve_matrix<T: Real>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    context: &'static str,
) -> Result<DMatrix<T>> {
    a.clone().lu().solve(b).ok_or(Error::Singular(context))
}

/// Block-diagonal stacking of square blocks.
pub fn block_diag<T: Real>(blocks: &[&DMatrix<T>]) -> DMatrix<T> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}
