//! Polynomial basis sets over a fixed monomial dictionary, with evaluation
//! tables and on-demand L2 orthonormalization.
//!
//! Differentiation happens exactly on the exponents; only inner products go
//! through quadrature.

use nalgebra::DMatrix;

use crate::dense;
use crate::error::Error;
use crate::mesh::Shape;
use crate::poly::{MonomialDict, Poly2};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolyKind {
    /// Total degree <= k.
    Pk,
    /// Tensor degree <= k in each variable (squares only).
    Qk,
    /// Homogeneous of total degree k.
    HomogeneousPk,
    /// Homogeneous tensor degree: span{x^k y^k} (squares only).
    HomogeneousQk,
}

/// A set of scalar basis functions stored as coefficient rows over a
/// monomial dictionary.
#[derive(Clone, Debug)]
pub struct BasisSet {
    pub shape: Shape,
    pub dict: MonomialDict,
    /// One row per basis function.
    pub coeffs: DMatrix<f64>,
    pub degree: u32,
}

impl BasisSet {
    pub fn polynomial(kind: PolyKind, k: u32, shape: Shape) -> Result<Self> {
        match (kind, shape) {
            (PolyKind::Qk | PolyKind::HomogeneousQk, Shape::Triangle) => {
                return Err(Error::InvalidArgument(format!(
                    "{kind:?} is only available on squares"
                )))
            }
            _ => {}
        }
        let exps: Vec<(u32, u32)> = match kind {
            PolyKind::Pk => (0..=k)
                .flat_map(|d| (0..=d).rev().map(move |ax| (ax, d - ax)))
                .collect(),
            PolyKind::Qk => (0..=k)
                .flat_map(|ax| (0..=k).map(move |ay| (ax, ay)))
                .collect(),
            PolyKind::HomogeneousPk => (0..=k).map(|ax| (ax, k - ax)).collect(),
            PolyKind::HomogeneousQk => vec![(k, k)],
        };
        let degree = exps.iter().map(|&(a, b)| a + b).max().unwrap_or(0);
        let dict = MonomialDict::total_degree(degree);
        let mut coeffs = DMatrix::zeros(exps.len(), dict.len());
        for (i, &(ax, ay)) in exps.iter().enumerate() {
            coeffs[(i, dict.index_of(ax, ay).expect("monomial in dictionary"))] = 1.0;
        }
        Ok(Self {
            shape,
            dict,
            coeffs,
            degree,
        })
    }

    pub fn len(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn poly(&self, i: usize) -> Poly2 {
        self.dict
            .poly_from_coeffs(self.coeffs.row(i).transpose().as_slice())
    }

    /// Values at the given points: row = function, column = point.
    pub fn evaluate(&self, points: &[[f64; 2]]) -> DMatrix<f64> {
        &self.coeffs * self.dict.eval_table(points)
    }

    /// Exact x/y-derivative value tables.
    pub fn evaluate_grad(&self, points: &[[f64; 2]]) -> (DMatrix<f64>, DMatrix<f64>) {
        let t = self.dict.eval_table(points);
        let dx = dict_derivative_matrix(&self.dict, true);
        let dy = dict_derivative_matrix(&self.dict, false);
        ((&self.coeffs * dx) * &t, (&self.coeffs * dy) * &t)
    }

    /// Quadrature Gram matrix with the given physical points/weights.
    pub fn gram(&self, points: &[[f64; 2]], weights: &[f64]) -> DMatrix<f64> {
        let e = weighted_eval(&self.evaluate(points), weights);
        &e * e.transpose()
    }

    /// L2-orthonormalization against the given quadrature; drops numerically
    /// dependent generators. Returns the orthonormal set, its rank and the
    /// smallest kept singular-value ratio.
    pub fn orthonormalized(
        &self,
        points: &[[f64; 2]],
        weights: &[f64],
        rel_tol: f64,
    ) -> (Self, usize, f64) {
        let e = weighted_eval(&self.evaluate(points), weights);
        let (w, rank, ratio) = dense::orthonormalize_rows(&e, rel_tol);
        let out = Self {
            shape: self.shape,
            dict: self.dict.clone(),
            coeffs: &w * &self.coeffs,
            degree: self.degree,
        };
        (out, rank, ratio)
    }
}

/// Multiplies a value table columnwise by sqrt(weight) so that `E E^T` is the
/// quadrature Gram matrix.
pub fn weighted_eval(values: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let mut e = values.clone();
    for (j, &w) in weights.iter().enumerate() {
        let sw = w.sqrt();
        for i in 0..e.nrows() {
            e[(i, j)] *= sw;
        }
    }
    e
}

/// Coefficient-space matrix of d/dx (or d/dy) over the dictionary, acting on
/// coefficient row vectors from the right: `coeffs_of(dp) = coeffs_of(p) * D`.
pub fn dict_derivative_matrix(dict: &MonomialDict, wrt_x: bool) -> DMatrix<f64> {
    let n = dict.len();
    let mut d = DMatrix::zeros(n, n);
    for (i, &(ax, ay)) in dict.exps().iter().enumerate() {
        if wrt_x && ax > 0 {
            if let Some(j) = dict.index_of(ax - 1, ay) {
                d[(i, j)] = ax as f64;
            }
        }
        if !wrt_x && ay > 0 {
            if let Some(j) = dict.index_of(ax, ay - 1) {
                d[(i, j)] = ay as f64;
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad;

    #[test]
    fn dimension_counts() {
        let p2 = BasisSet::polynomial(PolyKind::Pk, 2, Shape::Triangle).unwrap();
        assert_eq!(p2.len(), 6);
        let q1 = BasisSet::polynomial(PolyKind::Qk, 1, Shape::Square).unwrap();
        assert_eq!(q1.len(), 4);
        let h3 = BasisSet::polynomial(PolyKind::HomogeneousPk, 3, Shape::Triangle).unwrap();
        assert_eq!(h3.len(), 4);
        let hq2 = BasisSet::polynomial(PolyKind::HomogeneousQk, 2, Shape::Square).unwrap();
        assert_eq!(hq2.len(), 1);
    }

    #[test]
    fn qk_on_triangle_rejected() {
        assert!(BasisSet::polynomial(PolyKind::Qk, 1, Shape::Triangle).is_err());
    }

    #[test]
    fn evaluate_monomial() {
        let b = BasisSet::polynomial(PolyKind::Pk, 1, Shape::Triangle).unwrap();
        // basis order for P1: 1, x, y
        let v = b.evaluate(&[[0.3, 0.7]]);
        assert_eq!(v[(0, 0)], 1.0);
        assert_eq!(v[(1, 0)], 0.3);
        assert_eq!(v[(2, 0)], 0.7);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let b = BasisSet::polynomial(PolyKind::Pk, 3, Shape::Triangle).unwrap();
        let pts = [[0.31, 0.4], [0.1, 0.05], [0.6, 0.3]];
        let (gx, gy) = b.evaluate_grad(&pts);
        let eps = 1e-5;
        for (j, p) in pts.iter().enumerate() {
            let vxp = b.evaluate(&[[p[0] + eps, p[1]]]);
            let vxm = b.evaluate(&[[p[0] - eps, p[1]]]);
            let vyp = b.evaluate(&[[p[0], p[1] + eps]]);
            let vym = b.evaluate(&[[p[0], p[1] - eps]]);
            for i in 0..b.len() {
                let fdx = (vxp[(i, 0)] - vxm[(i, 0)]) / (2.0 * eps);
                let fdy = (vyp[(i, 0)] - vym[(i, 0)]) / (2.0 * eps);
                let scale = gx[(i, j)].abs().max(gy[(i, j)].abs()).max(1.0);
                assert!((gx[(i, j)] - fdx).abs() <= 1e-6 * scale);
                assert!((gy[(i, j)] - fdy).abs() <= 1e-6 * scale);
            }
        }
    }

    #[test]
    fn orthonormalized_gram_is_identity() {
        let rule = quad::quadrature(Shape::Triangle, 6).unwrap();
        let b = BasisSet::polynomial(PolyKind::Pk, 1, Shape::Triangle).unwrap();
        let (ob, rank, ratio) = b.orthonormalized(&rule.points, &rule.weights, 1e-10);
        assert_eq!(rank, 3);
        assert!(ratio > 1e-10);
        let g = ob.gram(&rule.points, &rule.weights);
        assert!((g - DMatrix::identity(3, 3)).norm() < 1e-13);
    }

    #[test]
    fn gram_is_spd() {
        for (kind, k, shape, deg) in [
            (PolyKind::Pk, 3u32, Shape::Triangle, 8u32),
            (PolyKind::Qk, 2, Shape::Square, 10),
            (PolyKind::HomogeneousPk, 2, Shape::Triangle, 6),
        ] {
            let rule = quad::quadrature(shape, deg).unwrap();
            let b = BasisSet::polynomial(kind, k, shape).unwrap();
            let g = b.gram(&rule.points, &rule.weights);
            let sym = (&g - g.transpose()).norm();
            assert!(sym < 1e-14 * g.norm());
            let eig = nalgebra::SymmetricEigen::new(g);
            assert!(eig.eigenvalues.iter().all(|&l| l > 0.0));
        }
    }
}
