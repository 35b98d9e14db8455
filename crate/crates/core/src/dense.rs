//! Small dense linear-algebra helpers: rank-revealing orthonormalization,
//! nullspaces and the projected symmetric generalized eigensolver used by
//! the inequality certification.
//!
//! Orthonormalization is pivoted modified Gram-Schmidt with a final
//! Cholesky polish rather than SVD: nalgebra's implicit-shift SVD
//! mis-converges on the nearly rank-deficient value matrices these space
//! constructions produce, while MGS with re-orthogonalization is exact to
//! roundoff and its pivot norms give rank decisions in the same units as
//! the anchor scale.

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::Result;

/// Numerical rank of `m` relative to its largest row/column norm.
pub fn svd_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    if m.nrows() <= m.ncols() {
        orthonormalize_rows(m, rel_tol).1
    } else {
        orthonormalize_rows(&m.transpose(), rel_tol).1
    }
}

pub fn largest_singular_value(m: &DMatrix<f64>) -> f64 {
    gram_extreme_singular_values(m).1
}

pub fn smallest_singular_value(m: &DMatrix<f64>) -> f64 {
    gram_extreme_singular_values(m).0
}

/// (smallest, largest) singular values via the eigenvalues of the smaller
/// Gram matrix. Accurate to ~sqrt(eps * smax^2), which is ample for the
/// norm-property checks these feed.
fn gram_extreme_singular_values(m: &DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 0 || m.ncols() == 0 {
        return (0.0, 0.0);
    }
    let gram = if m.nrows() <= m.ncols() {
        m * m.transpose()
    } else {
        m.transpose() * m
    };
    let eig = nalgebra::SymmetricEigen::new(gram);
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for &l in eig.eigenvalues.iter() {
        let l = l.max(0.0);
        lo = lo.min(l);
        hi = hi.max(l);
    }
    (lo.sqrt(), hi.sqrt())
}

/// Columns spanning the nullspace `{x : m x = 0}` at the given relative
/// tolerance.
pub fn nullspace_cols(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = m.ncols();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    if m.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    // orthonormal basis q of the row space, then the complement of q in R^n
    let (q_t, _rank, _) = orthonormalize_and_return_rows(m, rel_tol, None);
    let residual = DMatrix::identity(n, n) - q_t.transpose() * &q_t;
    let (basis, _rank2, _) = orthonormalize_and_return_rows(&residual, rel_tol, Some(1.0));
    basis.transpose()
}

/// Orthonormalizing transform for the row span of `e` (rows = functions,
/// columns = weighted samples, so that `e * e^T` is the Gram matrix).
///
/// Returns `(w, rank, sigma_ratio)` where `w * e` has orthonormal rows and
/// `sigma_ratio` is the smallest kept pivot norm relative to the largest.
pub fn orthonormalize_rows(e: &DMatrix<f64>, rel_tol: f64) -> (DMatrix<f64>, usize, f64) {
    orthonormalize_rows_anchored(e, rel_tol, None)
}

/// Like [`orthonormalize_rows`] but with a floor under the rank cutoff
/// scale. Used for derived spans (divergences, gradients, projection
/// residuals) where the span may be exactly zero: there the matrix's own
/// largest row norm is pure roundoff and must not anchor the cutoff.
pub fn orthonormalize_rows_anchored(
    e: &DMatrix<f64>,
    rel_tol: f64,
    anchor: Option<f64>,
) -> (DMatrix<f64>, usize, f64) {
    let n = e.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), 0, 0.0);
    }
    let mut rows = e.clone();
    let mut t = DMatrix::<f64>::identity(n, n);
    let mut used = vec![false; n];
    let mut kept: Vec<usize> = Vec::new();

    let initial_max = (0..n)
        .map(|i| rows.row(i).norm())
        .fold(0.0_f64, f64::max);
    let cutoff = rel_tol * anchor.map_or(initial_max, |a| a.max(initial_max));
    let mut last_norm = initial_max;

    loop {
        // pivot: largest remaining row
        let mut best = usize::MAX;
        let mut best_norm = cutoff;
        for i in 0..n {
            if !used[i] {
                let nrm = rows.row(i).norm();
                if nrm > best_norm {
                    best_norm = nrm;
                    best = i;
                }
            }
        }
        if best == usize::MAX {
            break;
        }
        used[best] = true;
        kept.push(best);
        last_norm = best_norm;
        let inv = 1.0 / best_norm;
        rows.row_mut(best).scale_mut(inv);
        t.row_mut(best).scale_mut(inv);
        // modified Gram-Schmidt update with one re-orthogonalization pass
        for _ in 0..2 {
            let piv = rows.row(best).into_owned();
            let piv_t = t.row(best).into_owned();
            for j in 0..n {
                if !used[j] {
                    let dot = rows.row(j).dot(&piv);
                    if dot != 0.0 {
                        let mut rj = rows.row_mut(j);
                        rj += piv.scale(-dot);
                        let mut tj = t.row_mut(j);
                        tj += piv_t.scale(-dot);
                    }
                }
            }
        }
    }

    let rank = kept.len();
    let mut q = DMatrix::zeros(rank, e.ncols());
    let mut w = DMatrix::zeros(rank, n);
    for (r, &i) in kept.iter().enumerate() {
        q.set_row(r, &rows.row(i));
        w.set_row(r, &t.row(i));
    }
    // Cholesky polish: make Q exactly orthonormal to roundoff
    if rank > 0 {
        let gram = &q * q.transpose();
        if let Some(chol) = nalgebra::Cholesky::new(gram) {
            let l_inv = chol
                .l()
                .solve_lower_triangular(&DMatrix::identity(rank, rank))
                .expect("triangular solve");
            w = &l_inv * w;
        }
    }
    let ratio = if initial_max > 0.0 {
        last_norm / initial_max
    } else {
        0.0
    };
    (w, rank, if rank == 0 { 0.0 } else { ratio })
}

/// Internal variant returning the orthonormal rows themselves.
fn orthonormalize_and_return_rows(
    e: &DMatrix<f64>,
    rel_tol: f64,
    anchor: Option<f64>,
) -> (DMatrix<f64>, usize, f64) {
    let (w, rank, ratio) = orthonormalize_rows_anchored(e, rel_tol, anchor);
    (&w * e, rank, ratio)
}

/// Result of a projected generalized eigensolve `A x = lambda B x` with
/// symmetric positive semidefinite `A`, `B`.
#[derive(Clone, Debug)]
pub struct GenEig {
    /// Largest generalized eigenvalue on the range of `B`.
    pub lambda_max: f64,
    /// Smallest generalized eigenvalue on the range of `B`.
    pub lambda_min: f64,
    /// Dimension of the kernel of `B` that was projected out.
    pub kernel_dim: usize,
    /// `max ||A z|| / ||A||` over kernel vectors `z` of `B`; the kernel
    /// inclusion `ker B subset ker A` holds when this is tiny.
    pub kernel_residual: f64,
}

/// Solves the symmetric generalized eigenproblem by eigendecomposing `B`,
/// dropping its kernel (eigenvalues below `kernel_tol * lambda_max(B)`) and
/// running a dense symmetric eigensolve on the congruence-transformed `A`.
pub fn generalized_sym_eig(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    kernel_tol: f64,
) -> Result<GenEig> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n);
    assert_eq!(b.nrows(), n);
    assert_eq!(b.ncols(), n);
    let a = symmetrize(a);
    let b = symmetrize(b);
    let eig_b = nalgebra::SymmetricEigen::new(b.clone());
    let lb_max = eig_b.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if lb_max <= 0.0 {
        return Err(Error::TheoremViolation(
            "quadratic form B vanishes identically".into(),
        ));
    }
    let mut range_idx = Vec::new();
    let mut kernel_idx = Vec::new();
    for (i, &l) in eig_b.eigenvalues.iter().enumerate() {
        if l > kernel_tol * lb_max {
            range_idx.push(i);
        } else {
            kernel_idx.push(i);
        }
    }
    let norm_a = largest_singular_value(&a).max(f64::MIN_POSITIVE);
    let mut kernel_residual = 0.0_f64;
    for &i in &kernel_idx {
        let z = eig_b.eigenvectors.column(i);
        let az = &a * z;
        kernel_residual = kernel_residual.max(az.norm() / norm_a);
    }
    // Y = V_range * diag(1/sqrt(lambda)), so Y^T B Y = I.
    let r = range_idx.len();
    let mut y = DMatrix::zeros(n, r);
    for (j, &i) in range_idx.iter().enumerate() {
        let col = eig_b.eigenvectors.column(i) / eig_b.eigenvalues[i].sqrt();
        y.set_column(j, &col);
    }
    let c = symmetrize(&(y.transpose() * &a * &y));
    let eig_c = nalgebra::SymmetricEigen::new(c);
    let lambda_max = eig_c.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lambda_min = eig_c.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(GenEig {
        lambda_max,
        lambda_min,
        kernel_dim: kernel_idx.len(),
        kernel_residual,
    })
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    0.5 * (m + m.transpose())
}

/// Solve with full pivoting; `None` when the matrix is numerically singular.
pub fn solve_full_piv(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().full_piv_lu().solve(rhs)
}

/// Column-pivoted QR solve together with a condition estimate from the
/// extreme diagonal entries of R.
pub fn solve_col_piv_qr(
    a: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
) -> Option<(DMatrix<f64>, f64)> {
    let qr = a.clone().col_piv_qr();
    let r = qr.r();
    let mut dmax = 0.0_f64;
    let mut dmin = f64::INFINITY;
    for i in 0..r.nrows().min(r.ncols()) {
        let d = r[(i, i)].abs();
        dmax = dmax.max(d);
        dmin = dmin.min(d);
    }
    if dmin == 0.0 || !dmin.is_finite() {
        return None;
    }
    let x = qr.solve(rhs)?;
    Some((x, dmax / dmin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nullspace_of_projection() {
        // A = diag(1, 1, 0): kernel is e3.
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.0]));
        let ns = nullspace_cols(&a, 1e-12);
        assert_eq!(ns.ncols(), 1);
        assert!((ns[(2, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthonormalize_detects_rank() {
        // three row-vectors, third = first + second
        let e = DMatrix::from_row_slice(3, 4, &[
            1.0, 0.0, 2.0, 0.0,
            0.0, 1.0, 1.0, 0.0,
            1.0, 1.0, 3.0, 0.0,
        ]);
        let (w, rank, _) = orthonormalize_rows(&e, 1e-10);
        assert_eq!(rank, 2);
        let q = &w * &e;
        let gram = &q * q.transpose();
        assert!((gram - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn orthonormalize_wide_ill_conditioned() {
        // wide, nearly rank-deficient rows (the case nalgebra's SVD fumbles)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = DMatrix::from_fn(3, 200, |_, _| rng.gen_range(-1.0..1.0f64));
        let mut e = DMatrix::zeros(5, 200);
        e.view_mut((0, 0), (3, 200)).copy_from(&base);
        // rows 3,4: combinations plus O(1e-14) noise
        for j in 0..200 {
            e[(3, j)] = base[(0, j)] + 0.5 * base[(1, j)] + 1e-14 * rng.gen_range(-1.0..1.0);
            e[(4, j)] = base[(2, j)] - base[(0, j)] + 1e-14 * rng.gen_range(-1.0..1.0);
        }
        let (w, rank, _) = orthonormalize_rows(&e, 1e-10);
        assert_eq!(rank, 3);
        let q = &w * &e;
        let gram = &q * q.transpose();
        assert!(
            (gram - DMatrix::identity(3, 3)).norm() < 1e-13,
            "orthonormality lost"
        );
    }

    #[test]
    fn anchored_rank_ignores_pure_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = DMatrix::from_fn(2, 50, |_, _| 1e-15 * rng.gen_range(-1.0..1.0f64));
        let (_, rank_rel, _) = orthonormalize_rows(&e, 1e-10);
        // relative tolerance sees structure in noise
        assert!(rank_rel >= 1);
        let (_, rank_anchored, _) = orthonormalize_rows_anchored(&e, 1e-10, Some(1.0));
        assert_eq!(rank_anchored, 0);
    }

    #[test]
    fn generalized_eig_with_singular_b() {
        // A = diag(2, 3, 0), B = diag(1, 1, 0): eigenvalues {2, 3} on range(B).
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0, 0.0]));
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.0]));
        let g = generalized_sym_eig(&a, &b, 1e-12).unwrap();
        assert!((g.lambda_max - 3.0).abs() < 1e-12);
        assert!((g.lambda_min - 2.0).abs() < 1e-12);
        assert_eq!(g.kernel_dim, 1);
        assert!(g.kernel_residual < 1e-14);
    }

    #[test]
    fn generalized_eig_flags_kernel_violation() {
        // ker B not inside ker A: A couples e3.
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0, 1.0]));
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 0.0]));
        let g = generalized_sym_eig(&a, &b, 1e-12).unwrap();
        assert!(g.kernel_residual > 1e-2);
    }
}
