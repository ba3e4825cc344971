use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Eigenvalues below this fraction of the largest eigenvalue count as zero.
pub const RANK_TOLERANCE: f64 = 1e-8;

/// Symmetric eigendecomposition with eigenvalues sorted ascending; column `k`
/// of the returned matrix is the eigenvector of `values[k]`.
pub fn sym_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), order.len(), |i, j| {
        eig.eigenvectors[(i, order[j])]
    });
    (values, vectors)
}

fn zero_threshold(values: &[f64], tol: f64) -> f64 {
    let max = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    tol * max
}

pub fn numerical_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    let (values, _) = sym_eigen(m);
    let thr = zero_threshold(&values, tol);
    values.iter().filter(|v| v.abs() > thr).count()
}

/// Orthonormal basis (as rows) of the eigenvectors whose eigenvalue is below
/// `tol` times the largest magnitude.
pub fn numerical_null_space(m: &DMatrix<f64>, tol: f64) -> Vec<Vec<f64>> {
    let (values, vectors) = sym_eigen(m);
    let thr = zero_threshold(&values, tol);
    values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() <= thr)
        .map(|(k, _)| vectors.column(k).iter().copied().collect())
        .collect()
}

/// Dense Cholesky factor with the handful of operations the engine needs.
#[derive(Debug, Clone)]
pub struct DenseCholesky {
    chol: Cholesky<f64, Dyn>,
}

impl DenseCholesky {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        Cholesky::new(m)
            .map(|chol| Self { chol })
            .ok_or(Error::NotPositiveDefinite { pivot: 0 })
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self
            .chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|v| v.ln())
            .sum::<f64>()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let v = self.chol.solve(&DVector::from_column_slice(b));
        v.iter().copied().collect()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}
