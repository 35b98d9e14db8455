//! Sparse assembly and direct/iterative solves for the condensed trace
//! systems.
//!
//! Assembly goes through a triplet list with a deterministic accumulation
//! order (element loop order fixed), so repeated runs produce identical
//! matrices bit for bit. The direct path is a sparse LU; the iterative path
//! is diagonally preconditioned CG for the symmetric positive definite
//! diffusion systems.

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};

use crate::error::Error;
use crate::Result;

/// Triplet accumulator for a square sparse system.
pub struct SparseBuilder {
    n: usize,
    triplets: Vec<Triplet<usize, usize, f64>>,
}

impl SparseBuilder {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            triplets: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn add(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(row < self.n && col < self.n);
        if val != 0.0 {
            self.triplets.push(Triplet::new(row, col, val));
        }
    }

    pub fn build(self) -> Result<SparseMatrix> {
        let mat = SparseColMat::try_new_from_triplets(self.n, self.n, &self.triplets)
            .map_err(|e| Error::Assembly(format!("sparse assembly failed: {e:?}")))?;
        Ok(SparseMatrix { mat })
    }
}

/// Immutable assembled sparse matrix.
pub struct SparseMatrix {
    mat: SparseColMat<usize, f64>,
}

impl SparseMatrix {
    pub fn n(&self) -> usize {
        self.mat.nrows()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut y = vec![0.0; n];
        let symbolic = self.mat.symbolic();
        for j in 0..n {
            let xi = x[j];
            if xi == 0.0 {
                continue;
            }
            for (i, v) in symbolic
                .row_idx_of_col(j)
                .zip(self.mat.val_of_col(j).iter())
            {
                y[i] += v * xi;
            }
        }
        y
    }

    /// Sparse LU solve (non-symmetric safe).
    pub fn solve_lu(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.n();
        let lu = self
            .mat
            .sp_lu()
            .map_err(|e| Error::Solver(format!("sparse LU factorization failed: {e:?}")))?;
        let b = Mat::from_fn(n, 1, |i, _| rhs[i]);
        let x = lu.solve(&b);
        Ok((0..n).map(|i| x[(i, 0)]).collect())
    }

    /// Sparse Cholesky for symmetric positive definite systems; fails on
    /// indefinite input, which doubles as the definiteness check.
    pub fn solve_cholesky(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.n();
        let llt = self
            .mat
            .sp_cholesky(faer::Side::Lower)
            .map_err(|e| Error::Solver(format!("sparse Cholesky failed (system not SPD?): {e:?}")))?;
        let b = Mat::from_fn(n, 1, |i, _| rhs[i]);
        let x = llt.solve(&b);
        Ok((0..n).map(|i| x[(i, 0)]).collect())
    }

    /// Diagonally preconditioned conjugate gradients (SPD systems only).
    pub fn solve_cg(&self, rhs: &[f64], rel_tol: f64, max_iter: usize) -> Result<Vec<f64>> {
        let n = self.n();
        let mut diag = vec![0.0; n];
        let symbolic = self.mat.symbolic();
        for j in 0..n {
            for (i, v) in symbolic
                .row_idx_of_col(j)
                .zip(self.mat.val_of_col(j).iter())
            {
                if i == j {
                    diag[j] += v;
                }
            }
        }
        for d in &diag {
            if *d <= 0.0 {
                return Err(Error::Solver("CG needs positive diagonal".into()));
            }
        }
        let mut x = vec![0.0; n];
        let mut r = rhs.to_vec();
        let bnorm = norm(&r).max(f64::MIN_POSITIVE);
        let mut z: Vec<f64> = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        for _ in 0..max_iter {
            if norm(&r) <= rel_tol * bnorm {
                return Ok(x);
            }
            let ap = self.mul_vec(&p);
            let alpha = rz / dot(&p, &ap);
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            z = r.iter().zip(&diag).map(|(ri, di)| ri / di).collect();
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        if norm(&r) <= rel_tol * bnorm {
            Ok(x)
        } else {
            Err(Error::Solver(format!(
                "CG stalled: relative residual {:.3e} after {max_iter} iterations",
                norm(&r) / bnorm
            )))
        }
    }

    pub fn residual_norm(&self, x: &[f64], rhs: &[f64]) -> f64 {
        let ax = self.mul_vec(x);
        let mut s = 0.0;
        for i in 0..x.len() {
            s += (ax[i] - rhs[i]).powi(2);
        }
        s.sqrt()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
