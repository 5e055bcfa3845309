//! Compressed sparse row matrices and a sparse Cholesky wrapper.

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FactorError {
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("matrix is numerically singular (condition estimate {0:.3e})")]
    Singular(f64),
    #[error("sparse factorization failed: {0}")]
    Backend(String),
}

/// Condition-number estimate above which a factorization is rejected.
const SINGULAR_CONDITION: f64 = 1e13;

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from `(row, col, value)` entries; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0; nrows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix { nrows, ncols, row_ptr, col_idx, values }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.nrows).into_par_iter().map(|i| self.row(i).map(|(c, v)| v * x[c]).sum()).collect()
    }

    pub fn transpose(&self) -> CsrMatrix {
        let entries = (0..self.nrows).flat_map(|i| self.row(i).map(move |(c, v)| (c, i, v))).collect();
        CsrMatrix::from_triplets(self.ncols, self.nrows, entries)
    }

    /// `Aᵀ A` as a sparse matrix.
    pub fn gram(&self) -> CsrMatrix {
        let dense = self.to_dense();
        let g = dense.transpose() * dense;
        CsrMatrix::from_dense(&g, 0.0)
    }

    pub fn from_dense(m: &DMatrix<f64>, drop_below: f64) -> CsrMatrix {
        let mut entries = Vec::new();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if m[(i, j)].abs() > drop_below {
                    entries.push((i, j, m[(i, j)]));
                }
            }
        }
        CsrMatrix::from_triplets(m.nrows(), m.ncols(), entries)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (c, v) in self.row(i) {
                m[(i, c)] += v;
            }
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Largest `|A_ij − A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let t = self.transpose();
        let mut worst = 0.0_f64;
        for i in 0..self.nrows {
            for (c, v) in self.row(i) {
                worst = worst.max((v - t.get(i, c)).abs());
            }
        }
        worst
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>, FactorError> {
        // sequential factorization keeps solutions independent of the thread count
        faer::set_global_parallelism(faer::Par::Seq);
        let triplets: Vec<Triplet<usize, usize, f64>> = (0..self.nrows)
            .flat_map(|i| self.row(i).map(move |(c, v)| Triplet { row: i, col: c, val: v }))
            .collect();
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &triplets)
            .map_err(|e| FactorError::Backend(format!("{e:?}")))
    }

    /// Sparse Cholesky factorization of a symmetric positive definite matrix.
    pub fn cholesky(&self) -> Result<Factorization, FactorError> {
        let a = self.to_faer()?;
        let llt = a.sp_cholesky(Side::Lower).map_err(|_| FactorError::NotPositiveDefinite)?;
        let f = Factorization { n: self.nrows, inner: Inner::Llt(llt) };
        f.check_conditioning(self)?;
        Ok(f)
    }

    /// Sparse LU with partial pivoting, for nonsymmetric or indefinite systems.
    pub fn lu(&self) -> Result<Factorization, FactorError> {
        let a = self.to_faer()?;
        // the backend panics on an exactly zero pivot instead of returning an error
        let lu = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| a.sp_lu()))
            .map_err(|_| FactorError::Singular(f64::INFINITY))?
            .map_err(|e| FactorError::Backend(format!("{e:?}")))?;
        let f = Factorization { n: self.nrows, inner: Inner::Lu(lu) };
        f.check_conditioning(self)?;
        Ok(f)
    }

    /// Cholesky, falling back to LU when the matrix is not positive definite.
    pub fn factorize(&self) -> Result<Factorization, FactorError> {
        match self.cholesky() {
            Ok(f) => Ok(f),
            Err(FactorError::NotPositiveDefinite) => self.lu(),
            Err(e) => Err(e),
        }
    }
}

enum Inner {
    Llt(faer::sparse::linalg::solvers::Llt<usize, f64>),
    Lu(faer::sparse::linalg::solvers::Lu<usize, f64>),
}

pub struct Factorization {
    n: usize,
    inner: Inner,
}

impl std::fmt::Debug for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.inner {
            Inner::Llt(_) => "llt",
            Inner::Lu(_) => "lu",
        };
        write!(f, "Factorization({kind}, n = {})", self.n)
    }
}

impl Factorization {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let rhs = Mat::from_fn(self.n, 1, |i, _| b[i]);
        let x = match &self.inner {
            Inner::Llt(f) => f.solve(&rhs),
            Inner::Lu(f) => f.solve(&rhs),
        };
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }

    /// Rejects factorizations whose solve amplifies a fixed probe vector
    /// beyond what a well-posed stiffness matrix can produce.
    fn check_conditioning(&self, a: &CsrMatrix) -> Result<(), FactorError> {
        if self.n == 0 {
            return Ok(());
        }
        let probe: Vec<f64> = (0..self.n).map(|i| 1.0 + ((i * 7919) % 101) as f64 / 101.0).collect();
        let x = self.solve(&probe);
        let inf = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let row_norm = (0..a.nrows).map(|i| a.row(i).map(|(_, v)| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        let estimate = row_norm * inf(&x) / inf(&probe);
        if !estimate.is_finite() || estimate > SINGULAR_CONDITION {
            return Err(FactorError::Singular(estimate));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates() {
        let m = CsrMatrix::from_triplets(2, 2, vec![(1, 0, 1.0), (0, 0, 2.0), (1, 0, 3.0), (1, 1, 1.0)]);
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(1, 0), 4.0);
        assert_eq!(m.matvec(&[1.0, 2.0]), vec![2.0, 6.0]);
    }

    #[test]
    fn cholesky_solves_spd() {
        let n = 6;
        let mut e = Vec::new();
        for i in 0..n {
            e.push((i, i, 2.0));
            if i + 1 < n {
                e.push((i, i + 1, -1.0));
                e.push((i + 1, i, -1.0));
            }
        }
        let a = CsrMatrix::from_triplets(n, n, e);
        let b: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let x = a.cholesky().unwrap().solve(&b);
        let r = a.matvec(&x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_is_rejected() {
        let a = CsrMatrix::from_triplets(2, 2, vec![(0, 0, 1.0), (0, 1, -1.0), (1, 0, -1.0), (1, 1, 1.0)]);
        assert!(a.cholesky().is_err());
        assert!(a.factorize().is_err());
    }
}
