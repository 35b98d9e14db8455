//! Bivariate polynomials with integer exponents.
//!
//! All space algebra downstream (gradients, divergences, curls, monomial
//! shifts) happens on exact exponent arithmetic; only inner products go
//! through quadrature.

/// One monomial term `c * x^ax * y^ay`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Term {
    pub ax: u32,
    pub ay: u32,
    pub c: f64,
}

/// A sparse bivariate polynomial. Terms are kept sorted by `(ax, ay)` with
/// unique exponent pairs; zero coefficients are dropped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Poly2 {
    terms: Vec<Term>,
}

impl Poly2 {
    pub fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn constant(c: f64) -> Self {
        Self::monomial(0, 0, c)
    }

    pub fn monomial(ax: u32, ay: u32, c: f64) -> Self {
        if c == 0.0 {
            return Self::zero();
        }
        Self {
            terms: vec![Term { ax, ay, c }],
        }
    }

    pub fn from_terms(mut terms: Vec<Term>) -> Self {
        terms.retain(|t| t.c != 0.0);
        terms.sort_by_key(|t| (t.ax, t.ay));
        let mut out: Vec<Term> = Vec::with_capacity(terms.len());
        for t in terms {
            match out.last_mut() {
                Some(last) if last.ax == t.ax && last.ay == t.ay => last.c += t.c,
                _ => out.push(t),
            }
        }
        out.retain(|t| t.c != 0.0);
        Self { terms: out }
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn total_degree(&self) -> u32 {
        self.terms.iter().map(|t| t.ax + t.ay).max().unwrap_or(0)
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut terms = self.terms.clone();
        terms.extend_from_slice(&other.terms);
        Self::from_terms(terms)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::from_terms(
            self.terms
                .iter()
                .map(|t| Term { c: s * t.c, ..*t })
                .collect(),
        )
    }

    /// Multiply by the monomial `c * x^ax * y^ay` (exact exponent shift).
    pub fn mul_monomial(&self, ax: u32, ay: u32, c: f64) -> Self {
        Self::from_terms(
            self.terms
                .iter()
                .map(|t| Term {
                    ax: t.ax + ax,
                    ay: t.ay + ay,
                    c: c * t.c,
                })
                .collect(),
        )
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut terms = Vec::with_capacity(self.terms.len() * other.terms.len());
        for a in &self.terms {
            for b in &other.terms {
                terms.push(Term {
                    ax: a.ax + b.ax,
                    ay: a.ay + b.ay,
                    c: a.c * b.c,
                });
            }
        }
        Self::from_terms(terms)
    }

    pub fn dx(&self) -> Self {
        Self::from_terms(
            self.terms
                .iter()
                .filter(|t| t.ax > 0)
                .map(|t| Term {
                    ax: t.ax - 1,
                    ay: t.ay,
                    c: t.c * t.ax as f64,
                })
                .collect(),
        )
    }

    pub fn dy(&self) -> Self {
        Self::from_terms(
            self.terms
                .iter()
                .filter(|t| t.ay > 0)
                .map(|t| Term {
                    ax: t.ax,
                    ay: t.ay - 1,
                    c: t.c * t.ay as f64,
                })
                .collect(),
        )
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.terms
            .iter()
            .map(|t| t.c * x.powi(t.ax as i32) * y.powi(t.ay as i32))
            .sum()
    }

    pub fn grad(&self) -> VecPoly2 {
        VecPoly2 {
            x: self.dx(),
            y: self.dy(),
        }
    }

    /// `curl p = (-p_y, p_x)`.
    pub fn curl(&self) -> VecPoly2 {
        VecPoly2 {
            x: self.dy().scale(-1.0),
            y: self.dx(),
        }
    }
}

/// A vector-valued polynomial, stored per component.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VecPoly2 {
    pub x: Poly2,
    pub y: Poly2,
}

impl VecPoly2 {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(x: Poly2, y: Poly2) -> Self {
        Self { x, y }
    }

    pub fn div(&self) -> Poly2 {
        self.x.dx().add(&self.y.dy())
    }

    pub fn eval(&self, x: f64, y: f64) -> [f64; 2] {
        [self.x.eval(x, y), self.y.eval(x, y)]
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            x: self.x.add(&other.x),
            y: self.y.add(&other.y),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            x: self.x.scale(s),
            y: self.y.scale(s),
        }
    }

    pub fn total_degree(&self) -> u32 {
        self.x.total_degree().max(self.y.total_degree())
    }
}

/// A fixed dictionary of monomials `x^a y^b`, used to express basis functions
/// as coefficient vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct MonomialDict {
    exps: Vec<(u32, u32)>,
}

impl MonomialDict {
    /// All monomials of total degree `<= deg`, graded lexicographic order.
    pub fn total_degree(deg: u32) -> Self {
        let mut exps = Vec::new();
        for d in 0..=deg {
            for ax in (0..=d).rev() {
                exps.push((ax, d - ax));
            }
        }
        Self { exps }
    }

    pub fn len(&self) -> usize {
        self.exps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exps.is_empty()
    }

    pub fn exps(&self) -> &[(u32, u32)] {
        &self.exps
    }

    pub fn index_of(&self, ax: u32, ay: u32) -> Option<usize> {
        // graded lexicographic: block for degree d starts at d(d+1)/2
        let d = ax + ay;
        let start = (d * (d + 1) / 2) as usize;
        let idx = start + ay as usize;
        if idx < self.exps.len() && self.exps[idx] == (ax, ay) {
            Some(idx)
        } else {
            None
        }
    }

    /// Coefficient vector of `p` over this dictionary. Returns `None` if `p`
    /// contains a monomial outside the dictionary.
    pub fn coeffs_of(&self, p: &Poly2) -> Option<Vec<f64>> {
        let mut v = vec![0.0; self.len()];
        for t in p.terms() {
            let i = self.index_of(t.ax, t.ay)?;
            v[i] += t.c;
        }
        Some(v)
    }

    pub fn poly_from_coeffs(&self, coeffs: &[f64]) -> Poly2 {
        Poly2::from_terms(
            coeffs
                .iter()
                .zip(self.exps.iter())
                .filter(|(c, _)| **c != 0.0)
                .map(|(c, &(ax, ay))| Term { ax, ay, c: *c })
                .collect(),
        )
    }

    /// Values of every dictionary monomial at the given points (row = monomial).
    pub fn eval_table(&self, points: &[[f64; 2]]) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.len(), points.len());
        for (j, p) in points.iter().enumerate() {
            for (i, &(ax, ay)) in self.exps.iter().enumerate() {
                m[(i, j)] = p[0].powi(ax as i32) * p[1].powi(ay as i32);
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn monomial_eval() {
        let p = Poly2::monomial(1, 0, 1.0);
        assert_eq!(p.eval(0.3, 0.7), 0.3);
    }

    #[test]
    fn gradient_of_x2y() {
        let p = Poly2::monomial(2, 1, 1.0);
        let g = p.grad();
        assert_eq!(g.eval(1.0, 1.0), [2.0, 1.0]);
    }

    #[test]
    fn curl_is_divergence_free() {
        let p = Poly2::from_terms(vec![
            Term { ax: 3, ay: 1, c: 2.0 },
            Term { ax: 1, ay: 2, c: -0.5 },
        ]);
        assert!(p.curl().div().is_zero());
    }

    #[test]
    fn dict_roundtrip() {
        let dict = MonomialDict::total_degree(5);
        assert_eq!(dict.len(), 21);
        let p = Poly2::from_terms(vec![
            Term { ax: 2, ay: 3, c: 1.5 },
            Term { ax: 0, ay: 0, c: -2.0 },
        ]);
        let c = dict.coeffs_of(&p).unwrap();
        assert_eq!(dict.poly_from_coeffs(&c), p);
        for (i, &(ax, ay)) in dict.exps().iter().enumerate() {
            assert_eq!(dict.index_of(ax, ay), Some(i));
        }
    }

    proptest! {
        // d/dx commutes with linear combination.
        #[test]
        fn differentiation_is_linear(
            a in -5.0f64..5.0, b in -5.0f64..5.0,
            e1 in 0u32..4, e2 in 0u32..4, e3 in 0u32..4, e4 in 0u32..4,
        ) {
            let p = Poly2::monomial(e1, e2, 1.0);
            let q = Poly2::monomial(e3, e4, 1.0);
            let combo = p.scale(a).add(&q.scale(b));
            let lhs = combo.dx();
            let rhs = p.dx().scale(a).add(&q.dx().scale(b));
            for &(x, y) in &[(0.3, -0.4), (1.1, 0.9), (-0.7, 0.2)] {
                prop_assert!((lhs.eval(x, y) - rhs.eval(x, y)).abs() < 1e-12);
            }
        }
    }
}
