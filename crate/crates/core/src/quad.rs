//! Quadrature rules on reference elements and edges.
//!
//! Square rules are tensor Gauss-Legendre on [0,1]^2; triangle rules come
//! from the Duffy (collapsed square) transform, which keeps all weights
//! positive at any degree. Edge rules are Gauss-Legendre on [0,1].

use crate::error::Error;
use crate::mesh::Shape;
use crate::Result;

/// Largest exactness degree served by [`quadrature`] / [`edge_quadrature`].
pub const MAX_DEGREE: u32 = 60;

/// A volume rule on the reference element (unit square `[0,1]^2` or the unit
/// triangle `{x, y >= 0, x + y <= 1}`).
#[derive(Clone, Debug)]
pub struct QuadRule {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub exactness: u32,
}

/// A rule on the reference edge `[0,1]`.
#[derive(Clone, Debug)]
pub struct EdgeQuadRule {
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    pub exactness: u32,
}

/// Gauss-Legendre nodes/weights on [0,1], exact for degree `2n - 1`.
///
/// Newton iteration on the Legendre recurrence with Chebyshev initial
/// guesses; accurate to machine precision for the sizes used here.
pub fn gauss_legendre_01(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // root of P_n on (-1,1), descending order
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = 0.5 * (1.0 - x); // map to [0,1], ascending
        weights[i] = 0.5 * w;
    }
    nodes.reverse();
    weights.reverse();
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Volume rule exact for all polynomials of total degree `<= degree` on the
/// given reference shape.
pub fn quadrature(shape: Shape, degree: u32) -> Result<QuadRule> {
    if degree > MAX_DEGREE {
        return Err(Error::UnsupportedDegree {
            requested: degree,
            max: MAX_DEGREE,
        });
    }
    match shape {
        Shape::Square => {
            let n = (degree as usize + 2) / 2; // 2n-1 >= degree
            let (x, w) = gauss_legendre_01(n.max(1));
            let mut points = Vec::with_capacity(n * n);
            let mut weights = Vec::with_capacity(n * n);
            for i in 0..x.len() {
                for j in 0..x.len() {
                    points.push([x[i], x[j]]);
                    weights.push(w[i] * w[j]);
                }
            }
            Ok(QuadRule {
                points,
                weights,
                exactness: degree,
            })
        }
        Shape::Triangle => {
            // Duffy: (s,t) in [0,1]^2 -> (x,y) = (s(1-t), t), Jacobian (1-t).
            // x^a y^b pulls back to s^a (1-t)^(a+1) t^b: 1D degree degree+1.
            let n = (degree as usize + 3) / 2; // 2n-1 >= degree+1
            let (x, w) = gauss_legendre_01(n.max(1));
            let mut points = Vec::with_capacity(n * n);
            let mut weights = Vec::with_capacity(n * n);
            for i in 0..x.len() {
                for j in 0..x.len() {
                    let (s, t) = (x[i], x[j]);
                    points.push([s * (1.0 - t), t]);
                    weights.push(w[i] * w[j] * (1.0 - t));
                }
            }
            Ok(QuadRule {
                points,
                weights,
                exactness: degree,
            })
        }
    }
}

/// Edge rule on [0,1] exact for degree `<= degree`.
pub fn edge_quadrature(degree: u32) -> Result<EdgeQuadRule> {
    if degree > MAX_DEGREE {
        return Err(Error::UnsupportedDegree {
            requested: degree,
            max: MAX_DEGREE,
        });
    }
    let n = (degree as usize + 2) / 2;
    let (points, weights) = gauss_legendre_01(n.max(1));
    Ok(EdgeQuadRule {
        points,
        weights,
        exactness: degree,
    })
}
