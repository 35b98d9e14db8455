//! Norms and seminorms, the projections used in the error analysis,
//! manufactured problems, error tables and observed convergence orders.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::localops::{self, weighted_product};
use crate::spaces::LocalSpaces;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeminormMode {
    /// `||grad u||^2_K + h^-1 ||u - uhat||^2_dK`
    H1,
    /// `||u - mean(uhat)||^2_K + h ||uhat - mean(uhat)||^2_dK`
    Pf,
    /// `||u||^2_K + h (||uhat||^2_dK + ||u - uhat||^2_dK)`
    L0,
}

/// Squared seminorm of a scalar pair `(u, uhat)` on one element; `u` in W
/// coefficients, `uhat` in stacked M coefficients.
pub fn seminorm_sq(
    ls: &LocalSpaces,
    u: &DVector<f64>,
    uhat: &DVector<f64>,
    mode: SeminormMode,
) -> f64 {
    let class = &ls.class;
    let tab = &class.tab;
    let h = ls.h();
    match mode {
        SeminormMode::H1 => {
            let mut grad = 0.0;
            for (q, &w) in class.vol_w.iter().enumerate() {
                let mut gx = 0.0;
                let mut gy = 0.0;
                for i in 0..class.w.len() {
                    gx += u[i] * tab.w_gx[(i, q)];
                    gy += u[i] * tab.w_gy[(i, q)];
                }
                grad += w * (gx * gx + gy * gy);
            }
            grad + boundary_jump_sq(ls, u, uhat) / h
        }
        SeminormMode::Pf => {
            let perimeter = ls.geom.perimeter();
            let ghat = localops::m_moments_of_one(ls);
            let mean = ghat.dot(uhat) / perimeter;
            let mut vol = 0.0;
            for (q, &w) in class.vol_w.iter().enumerate() {
                let mut uval = 0.0;
                for i in 0..class.w.len() {
                    uval += u[i] * tab.w_vol[(i, q)];
                }
                vol += w * (uval - mean) * (uval - mean);
            }
            let mut bdry = 0.0;
            for lf in 0..ls.n_faces() {
                let off = class.m.offsets[lf];
                let mf = &tab.m_face[lf];
                for (q, &w) in class.face_w[lf].iter().enumerate() {
                    let mut val = 0.0;
                    for l in 0..mf.nrows() {
                        val += uhat[off + l] * mf[(l, q)];
                    }
                    bdry += w * (val - mean) * (val - mean);
                }
            }
            vol + h * bdry
        }
        SeminormMode::L0 => {
            let vol = u.dot(u); // W orthonormal
            let mut bdry_hat = 0.0;
            for lf in 0..ls.n_faces() {
                let off = class.m.offsets[lf];
                for l in 0..tab.m_face[lf].nrows() {
                    bdry_hat += uhat[off + l] * uhat[off + l];
                }
            }
            vol + h * (bdry_hat + boundary_jump_sq(ls, u, uhat))
        }
    }
}

/// `||u - uhat||^2_dK`.
fn boundary_jump_sq(ls: &LocalSpaces, u: &DVector<f64>, uhat: &DVector<f64>) -> f64 {
    let class = &ls.class;
    let tab = &class.tab;
    let mut jump = 0.0;
    for lf in 0..ls.n_faces() {
        let off = class.m.offsets[lf];
        let mf = &tab.m_face[lf];
        let wf = &tab.w_face[lf];
        for (q, &w) in class.face_w[lf].iter().enumerate() {
            let mut uval = 0.0;
            for i in 0..class.w.len() {
                uval += u[i] * wf[(i, q)];
            }
            let mut hval = 0.0;
            for l in 0..mf.nrows() {
                hval += uhat[off + l] * mf[(l, q)];
            }
            jump += w * (uval - hval) * (uval - hval);
        }
    }
    jump
}

/// L2 projection onto `V(K)` (orthonormal basis, vectors in physical
/// components).
pub fn l2_project_v(ls: &LocalSpaces, f: impl Fn([f64; 2]) -> [f64; 2]) -> DVector<f64> {
    let class = &ls.class;
    let tab = &class.tab;
    let pts = ls.vol_points_phys();
    let mut out = DVector::zeros(class.v.len());
    for (q, (&w, p)) in class.vol_w.iter().zip(&pts).enumerate() {
        let val = ls.geom.vec_to_local(f(*p));
        for i in 0..class.v.len() {
            out[i] += w * (val[0] * tab.v_x[(i, q)] + val[1] * tab.v_y[(i, q)]);
        }
    }
    out
}

/// The projection `Pi_W` of the error analysis: matches moments against
/// `Wt = div V` in the volume and against `M_S` on the boundary. The system
/// is square by the stabilization dimension identity.
pub fn project_pi_w(ls: &LocalSpaces, f: impl Fn([f64; 2]) -> f64) -> Result<DVector<f64>> {
    let class = &ls.class;
    let dict = &class.dict;
    let nw = class.w.len();
    let n_wt = class.wt.len();
    let n_ms = class.ms.total;
    if n_wt + n_ms != nw {
        return Err(Error::Construction(format!(
            "Pi_W system not square: {n_wt} + {n_ms} != {nw}"
        )));
    }
    // rows: (w_j, wt_i)_K then <w_j, phi^MS_m>_dK; rhs: same moments of f
    let t_vol = dict.eval_table(&class.vol_loc);
    let wt_vals = &class.wt.coeffs * &t_vol;
    let vol_block = weighted_product(&wt_vals, &class.tab.w_vol, &class.vol_w);
    let (ju, _) = localops::ms_jump_map(ls);
    let mut a = DMatrix::zeros(nw, nw);
    a.view_mut((0, 0), (n_wt, nw)).copy_from(&vol_block);
    a.view_mut((n_wt, 0), (n_ms, nw)).copy_from(&ju);

    let mut rhs = DVector::zeros(nw);
    let pts = ls.vol_points_phys();
    for (q, (&w, p)) in class.vol_w.iter().zip(&pts).enumerate() {
        let val = f(*p);
        for i in 0..n_wt {
            rhs[i] += w * val * wt_vals[(i, q)];
        }
    }
    for lf in 0..ls.n_faces() {
        let msf = &class.tab.ms_face[lf];
        if msf.nrows() == 0 {
            continue;
        }
        let off = class.ms.offsets[lf];
        let fpts = ls.face_points_phys(lf);
        for (q, (&w, p)) in class.face_w[lf].iter().zip(&fpts).enumerate() {
            let val = f(*p);
            for m in 0..msf.nrows() {
                rhs[n_wt + off + m] += w * val * msf[(m, q)];
            }
        }
    }
    crate::dense::solve_full_piv(&a, &rhs)
        .ok_or_else(|| Error::Construction("singular Pi_W system".into()))
}

/// Exact fields of a manufactured incompressible flow problem.
#[derive(Clone)]
pub struct NsExact {
    pub name: String,
    pub nu: f64,
    pub velocity: Arc<dyn Fn([f64; 2]) -> [f64; 2] + Send + Sync>,
    /// `L = grad u`, row i = gradient of component i.
    pub gradient: Arc<dyn Fn([f64; 2]) -> [[f64; 2]; 2] + Send + Sync>,
    pub pressure: Arc<dyn Fn([f64; 2]) -> f64 + Send + Sync>,
    /// Momentum forcing of the Navier-Stokes system.
    pub forcing: Arc<dyn Fn([f64; 2]) -> [f64; 2] + Send + Sync>,
    /// Forcing of the Stokes system with the same `(u, p)`.
    pub forcing_stokes: Arc<dyn Fn([f64; 2]) -> [f64; 2] + Send + Sync>,
}

/// Manufactured problems on the unit square: `trig` (divergence-free curl
/// of sin^2 x sin^2 y stream function, zero boundary trace) and `kovasznay`
/// (classical wake solution, nonzero boundary data, zero NS forcing).
pub fn manufactured_problem(name: &str, nu: f64) -> Result<NsExact> {
    if nu <= 0.0 {
        return Err(Error::InvalidArgument("nu must be positive".into()));
    }
    use std::f64::consts::PI;
    match name {
        "trig" => {
            let u = move |p: [f64; 2]| -> [f64; 2] {
                let (x, y) = (p[0], p[1]);
                let sx = (PI * x).sin();
                let sy = (PI * y).sin();
                [
                    -PI * sx * sx * (2.0 * PI * y).sin(),
                    PI * (2.0 * PI * x).sin() * sy * sy,
                ]
            };
            let grad = move |p: [f64; 2]| -> [[f64; 2]; 2] {
                let (x, y) = (p[0], p[1]);
                let sx = (PI * x).sin();
                let sy = (PI * y).sin();
                let s2x = (2.0 * PI * x).sin();
                let s2y = (2.0 * PI * y).sin();
                let c2x = (2.0 * PI * x).cos();
                let c2y = (2.0 * PI * y).cos();
                [
                    [-PI * PI * s2x * s2y, -2.0 * PI * PI * sx * sx * c2y],
                    [2.0 * PI * PI * c2x * sy * sy, PI * PI * s2x * s2y],
                ]
            };
            let laplacian = move |p: [f64; 2]| -> [f64; 2] {
                let (x, y) = (p[0], p[1]);
                let sx = (PI * x).sin();
                let sy = (PI * y).sin();
                let s2x = (2.0 * PI * x).sin();
                let s2y = (2.0 * PI * y).sin();
                let c2x = (2.0 * PI * x).cos();
                let c2y = (2.0 * PI * y).cos();
                let p3 = PI * PI * PI;
                [
                    -2.0 * p3 * c2x * s2y + 4.0 * p3 * sx * sx * s2y,
                    -4.0 * p3 * s2x * sy * sy + 2.0 * p3 * s2x * c2y,
                ]
            };
            let grad_p = move |p: [f64; 2]| -> [f64; 2] {
                let (x, y) = (p[0], p[1]);
                [
                    -PI * (PI * x).sin() * (PI * y).cos(),
                    -PI * (PI * x).cos() * (PI * y).sin(),
                ]
            };
            let pressure = move |p: [f64; 2]| (PI * p[0]).cos() * (PI * p[1]).cos();
            let forcing = move |p: [f64; 2]| -> [f64; 2] {
                let uv = u(p);
                let g = grad(p);
                let lap = laplacian(p);
                let gp = grad_p(p);
                [
                    -nu * lap[0] + uv[0] * g[0][0] + uv[1] * g[0][1] + gp[0],
                    -nu * lap[1] + uv[0] * g[1][0] + uv[1] * g[1][1] + gp[1],
                ]
            };
            let forcing_stokes = move |p: [f64; 2]| -> [f64; 2] {
                let lap = laplacian(p);
                let gp = grad_p(p);
                [-nu * lap[0] + gp[0], -nu * lap[1] + gp[1]]
            };
            Ok(NsExact {
                name: name.into(),
                nu,
                velocity: Arc::new(u),
                gradient: Arc::new(grad),
                pressure: Arc::new(pressure),
                forcing: Arc::new(forcing),
                forcing_stokes: Arc::new(forcing_stokes),
            })
        }
        "kovasznay" => {
            let re = 1.0 / nu;
            let lam = 0.5 * re - (0.25 * re * re + 4.0 * PI * PI).sqrt();
            let u = move |p: [f64; 2]| -> [f64; 2] {
                let e = (lam * p[0]).exp();
                [
                    1.0 - e * (2.0 * PI * p[1]).cos(),
                    lam / (2.0 * PI) * e * (2.0 * PI * p[1]).sin(),
                ]
            };
            let grad = move |p: [f64; 2]| -> [[f64; 2]; 2] {
                let e = (lam * p[0]).exp();
                let c = (2.0 * PI * p[1]).cos();
                let s = (2.0 * PI * p[1]).sin();
                [
                    [-lam * e * c, 2.0 * PI * e * s],
                    [lam * lam / (2.0 * PI) * e * s, lam * e * c],
                ]
            };
            // mean of p over the unit square subtracted in closed form
            let mean = 0.5 * (1.0 - ((2.0 * lam).exp() - 1.0) / (2.0 * lam));
            let pressure = move |p: [f64; 2]| 0.5 * (1.0 - (2.0 * lam * p[0]).exp()) - mean;
            let forcing = move |_p: [f64; 2]| [0.0, 0.0];
            let forcing_stokes = move |p: [f64; 2]| -> [f64; 2] {
                // f_stokes = -(u . grad) u for the Kovasznay pair
                let uv = u(p);
                let g = grad(p);
                [
                    -(uv[0] * g[0][0] + uv[1] * g[0][1]),
                    -(uv[0] * g[1][0] + uv[1] * g[1][1]),
                ]
            };
            Ok(NsExact {
                name: name.into(),
                nu,
                velocity: Arc::new(u),
                gradient: Arc::new(grad),
                pressure: Arc::new(pressure),
                forcing: Arc::new(forcing),
                forcing_stokes: Arc::new(forcing_stokes),
            })
        }
        other => Err(Error::InvalidArgument(format!(
            "unknown manufactured problem `{other}`"
        ))),
    }
}

/// Observed convergence order between two refinement levels (`h` halves).
pub fn observed_order(err_coarse: f64, err_fine: f64) -> Option<f64> {
    if err_coarse > 1e-13 && err_fine > 1e-13 {
        Some((err_coarse / err_fine).log2())
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{ElementGeom, Shape};
    use crate::spaces::Family;

    fn unit_triangle() -> ElementGeom {
        ElementGeom::standalone(Shape::Triangle, vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    }

    #[test]
    fn seminorms_vanish_on_constants() {
        let ls = LocalSpaces::build(Family::Hdg, 1, &unit_triangle()).unwrap();
        let u = localops::project_onto_w(&ls, |_| 1.0);
        let uhat = localops::project_onto_m(&ls, |_| 1.0);
        assert!(seminorm_sq(&ls, &u, &uhat, SeminormMode::H1) < 1e-13);
        assert!(seminorm_sq(&ls, &u, &uhat, SeminormMode::Pf) < 1e-13);
        assert!(seminorm_sq(&ls, &u, &uhat, SeminormMode::L0) > 0.0);
    }

    #[test]
    fn h1_seminorm_of_linear_pair() {
        // (x, trace x): grad = (1,0), no jump: H1^2 = area = 1/2
        let ls = LocalSpaces::build(Family::Hdg, 1, &unit_triangle()).unwrap();
        let u = localops::project_onto_w(&ls, |p| p[0]);
        let uhat = localops::project_onto_m(&ls, |p| p[0]);
        let h1 = seminorm_sq(&ls, &u, &uhat, SeminormMode::H1);
        assert!((h1 - 0.5).abs() < 1e-13, "{h1}");
    }

    #[test]
    fn seminorm_equivalence_on_random_pairs() {
        use rand::prelude::*;
        let ls = LocalSpaces::build(Family::Hdg, 1, &unit_triangle()).unwrap();
        let (lo, hi) = crate::mdecomp::seminorm_equivalence(&ls).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let h = ls.h();
        for _ in 0..20 {
            let u = DVector::from_fn(ls.nw(), |_, _| rng.gen_range(-1.0..1.0));
            let uhat = DVector::from_fn(ls.nm(), |_, _| rng.gen_range(-1.0..1.0));
            let h1 = seminorm_sq(&ls, &u, &uhat, SeminormMode::H1);
            let pf = seminorm_sq(&ls, &u, &uhat, SeminormMode::Pf) / (h * h);
            if h1 < 1e-13 {
                continue;
            }
            let ratio = h1 / pf;
            assert!(
                ratio >= lo * (1.0 - 1e-9) && ratio <= hi * (1.0 + 1e-9),
                "ratio {ratio} outside [{lo}, {hi}]"
            );
        }
    }

    #[test]
    fn pi_w_reproduces_space_members() {
        let ls = LocalSpaces::build(Family::Hdg, 1, &unit_triangle()).unwrap();
        let exact = |p: [f64; 2]| 1.0 + 2.0 * p[0] - 0.5 * p[1];
        let pi = project_pi_w(&ls, exact).unwrap();
        let l2 = localops::project_onto_w(&ls, exact);
        assert!((pi - l2).amax() < 1e-12);
    }

    #[test]
    fn pi_w_equals_l2_for_mixed_families() {
        // M_S empty: Pi_W moments against Wt = W give the L2 projection
        let ls = LocalSpaces::build(Family::Rt, 1, &unit_triangle()).unwrap();
        let exact = |p: [f64; 2]| (p[0] * 3.0).sin() + p[1];
        let pi = project_pi_w(&ls, exact).unwrap();
        let l2 = localops::project_onto_w(&ls, exact);
        assert!((pi - l2).amax() < 1e-12);
    }

    #[test]
    fn trig_problem_is_divergence_free_and_zero_on_boundary() {
        let ex = manufactured_problem("trig", 1.0).unwrap();
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let p = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let g = (ex.gradient)(p);
            assert!((g[0][0] + g[1][1]).abs() <= 1e-13, "div u != 0 at {p:?}");
        }
        for t in [0.0, 0.3, 0.7, 1.0] {
            for p in [[t, 0.0], [t, 1.0], [0.0, t], [1.0, t]] {
                let u = (ex.velocity)(p);
                assert!(u[0].abs() < 1e-13 && u[1].abs() < 1e-13);
            }
        }
    }

    #[test]
    fn trig_forcing_matches_finite_difference_oracle() {
        let nu = 1.0;
        let ex = manufactured_problem("trig", nu).unwrap();
        let u = &ex.velocity;
        let pr = &ex.pressure;
        // Richardson-extrapolated central differences: the plain 5-point
        // Laplacian at eps = 1e-5 is dominated by cancellation noise
        let lap_at = |p: [f64; 2], i: usize, eps: f64| -> f64 {
            (u([p[0] + eps, p[1]])[i] + u([p[0] - eps, p[1]])[i] + u([p[0], p[1] + eps])[i]
                + u([p[0], p[1] - eps])[i]
                - 4.0 * u(p)[i])
                / (eps * eps)
        };
        for p in [[0.5, 0.5], [0.37, 0.61]] {
            let f = (ex.forcing)(p);
            let eps = 1e-3;
            let dx = |g: &dyn Fn([f64; 2]) -> f64| {
                let d = |e: f64| (g([p[0] + e, p[1]]) - g([p[0] - e, p[1]])) / (2.0 * e);
                (4.0 * d(eps) - d(2.0 * eps)) / 3.0
            };
            let dy = |g: &dyn Fn([f64; 2]) -> f64| {
                let d = |e: f64| (g([p[0], p[1] + e]) - g([p[0], p[1] - e])) / (2.0 * e);
                (4.0 * d(eps) - d(2.0 * eps)) / 3.0
            };
            let uv = u(p);
            for i in 0..2 {
                let lap = (4.0 * lap_at(p, i, eps) - lap_at(p, i, 2.0 * eps)) / 3.0;
                let conv = uv[0] * dx(&|q| u(q)[i]) + uv[1] * dy(&|q| u(q)[i]);
                let gp = if i == 0 { dx(&|q| pr(q)) } else { dy(&|q| pr(q)) };
                let fd = -nu * lap + conv + gp;
                assert!(
                    (fd - f[i]).abs() <= 1e-6 * f[i].abs().max(1.0),
                    "at {p:?} component {i}: {fd} vs {}",
                    f[i]
                );
            }
        }
    }

    #[test]
    fn kovasznay_satisfies_ns_with_zero_forcing() {
        let nu = 0.1;
        let ex = manufactured_problem("kovasznay", nu).unwrap();
        // momentum residual by finite differences at an interior point
        let p = [0.4, 0.3];
        let eps = 1e-5;
        let u = &ex.velocity;
        let pr = &ex.pressure;
        for i in 0..2 {
            let lap = (u([p[0] + eps, p[1]])[i] + u([p[0] - eps, p[1]])[i]
                + u([p[0], p[1] + eps])[i]
                + u([p[0], p[1] - eps])[i]
                - 4.0 * u(p)[i])
                / (eps * eps);
            let dxu = (u([p[0] + eps, p[1]])[i] - u([p[0] - eps, p[1]])[i]) / (2.0 * eps);
            let dyu = (u([p[0], p[1] + eps])[i] - u([p[0], p[1] - eps])[i]) / (2.0 * eps);
            let uv = u(p);
            let conv = uv[0] * dxu + uv[1] * dyu;
            let gp = if i == 0 {
                (pr([p[0] + eps, p[1]]) - pr([p[0] - eps, p[1]])) / (2.0 * eps)
            } else {
                (pr([p[0], p[1] + eps]) - pr([p[0], p[1] - eps])) / (2.0 * eps)
            };
            let res = -nu * lap + conv + gp;
            assert!(res.abs() < 1e-4, "component {i}: residual {res}");
        }
    }

    #[test]
    fn unknown_problem_is_invalid() {
        assert!(manufactured_problem("nope", 1.0).is_err());
        assert!(manufactured_problem("trig", 0.0).is_err());
    }

    #[test]
    fn observed_order_saturates() {
        assert!(observed_order(1e-14, 1e-15).is_none());
        let o = observed_order(1e-2, 2.5e-3).unwrap();
        assert!((o - 2.0).abs() < 1e-12);
    }
}

// ---------------------------------------------------------------------------
// Navier-Stokes error measurement
// ---------------------------------------------------------------------------

use crate::mesh::Mesh;
use crate::navierstokes::{NsProblem, NsSolution, PicardTrace};
use crate::spaces::Family;

/// One refinement level of a convergence study. All error quantities use
/// the projections of the error analysis: `e_L = P_G L - L_h`,
/// `e_u = Pi_V u - u_h`, `e_p = P_Q p - p_h`, `e_uhat = P_M u - uhat_h`.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct NsErrorRow {
    pub n: usize,
    pub h: f64,
    /// Condensed global system size.
    pub dofs: usize,
    /// `||L - L_h||`.
    pub err_l: f64,
    /// `||u - u_h||`.
    pub err_u: f64,
    /// `||p - p_h||`.
    pub err_p: f64,
    /// `||P_G L - L_h||`.
    pub e_l: f64,
    /// `||Pi_V u - u_h||` (the superconvergent quantity).
    pub e_u: f64,
    /// `|||(e_u, e_uhat)|||_1`.
    pub e_h1: f64,
    /// `h^-1 |||(e_u, e_uhat)|||_PF`.
    pub e_pf_scaled: f64,
    /// `|||(e_u, e_uhat)|||_0`.
    pub e_l0: f64,
    /// `max_K ||div beta||_K`.
    pub max_div_beta: f64,
    /// Viscous energy of the discrete solution.
    pub energy: f64,
    /// `Theta_ns^(1/2)` of the consistency-error quantity.
    pub theta_ns_sqrt: f64,
    /// LHS of the energy-argument bound over `nu^-1 Theta_ns^(1/2)`.
    pub ratio_energy_bound: f64,
    /// `nu |||(u_h, uhat_h)|||_1 / ||f||`.
    pub stability_ratio: f64,
    /// Richardson discrepancy of the error quadrature (one degree higher).
    pub quadrature_drift: f64,
    pub picard_iterations: usize,
}

/// Evaluates a discrete scalar field at arbitrary local points.
fn eval_scalar(
    ls: &crate::spaces::LocalSpaces,
    coeffs: &DVector<f64>,
    space: &crate::spaces::ScalarFunctions,
    pts_loc: &[[f64; 2]],
) -> Vec<f64> {
    let table = ls.class.dict.eval_table(pts_loc);
    let vals = &space.coeffs * &table;
    (0..pts_loc.len())
        .map(|q| (0..coeffs.len()).map(|j| coeffs[j] * vals[(j, q)]).sum())
        .collect()
}

fn eval_vector(
    ls: &crate::spaces::LocalSpaces,
    coeffs: &DVector<f64>,
    space: &crate::spaces::VectorFunctions,
    pts_loc: &[[f64; 2]],
) -> Vec<[f64; 2]> {
    let table = ls.class.dict.eval_table(pts_loc);
    let vx = &space.cx * &table;
    let vy = &space.cy * &table;
    (0..pts_loc.len())
        .map(|q| {
            let mut out = [0.0, 0.0];
            for j in 0..coeffs.len() {
                out[0] += coeffs[j] * vx[(j, q)];
                out[1] += coeffs[j] * vy[(j, q)];
            }
            out
        })
        .collect()
}

/// Squared L2 error sums of (L, u, p) against the exact fields at a given
/// quadrature degree (volume rule built per element on the fly).
fn ns_l2_errors_at_degree(
    mesh: &Mesh,
    sol: &NsSolution,
    exact: &NsExact,
    degree: u32,
) -> Result<(f64, f64, f64)> {
    let mut el = 0.0;
    let mut eu = 0.0;
    let mut ep = 0.0;
    for e in 0..mesh.n_elements() {
        let ls = &sol.spaces[e].scalar;
        let rule = crate::quad::quadrature(ls.geom.shape, degree)?;
        let (loc, wts) = crate::spaces::map_volume_rule_public(&ls.geom, &rule);
        let phys: Vec<[f64; 2]> = loc.iter().map(|&l| ls.geom.phys(l)).collect();
        let lx = eval_vector(ls, &sol.l[e][0], &ls.class.v, &loc);
        let ly = eval_vector(ls, &sol.l[e][1], &ls.class.v, &loc);
        let ux = eval_scalar(ls, &sol.u[e][0], &ls.class.w, &loc);
        let uy = eval_scalar(ls, &sol.u[e][1], &ls.class.w, &loc);
        let pv = eval_scalar(ls, &sol.p[e], &ls.class.w, &loc);
        for (q, (&w, x)) in wts.iter().zip(&phys).enumerate() {
            let gex = (exact.gradient)(*x);
            el += w
                * ((lx[q][0] - gex[0][0]).powi(2)
                    + (lx[q][1] - gex[0][1]).powi(2)
                    + (ly[q][0] - gex[1][0]).powi(2)
                    + (ly[q][1] - gex[1][1]).powi(2));
            let uex = (exact.velocity)(*x);
            eu += w * ((ux[q] - uex[0]).powi(2) + (uy[q] - uex[1]).powi(2));
            ep += w * (pv[q] - (exact.pressure)(*x)).powi(2);
        }
    }
    Ok((el, eu, ep))
}

/// Full error row for a Navier-Stokes (or Stokes) solution.
pub fn ns_error_row(
    mesh: &Mesh,
    sol: &NsSolution,
    exact: &NsExact,
    trace: &PicardTrace,
    n: usize,
    dofs: usize,
    f_norm: f64,
) -> Result<NsErrorRow> {
    let k = sol.k;
    // absolute L2 errors at degree 3k+6 with a Richardson check one higher
    let (el2, eu2, ep2) = ns_l2_errors_at_degree(mesh, sol, exact, 3 * k + 6)?;
    let (el2b, eu2b, ep2b) = ns_l2_errors_at_degree(mesh, sol, exact, 3 * k + 7)?;
    let quadrature_drift = ((el2 - el2b).abs() + (eu2 - eu2b).abs() + (ep2 - ep2b).abs())
        / (el2 + eu2 + ep2).max(1e-300);

    // P_Q p: elementwise projection shifted to global mean zero
    let mut p_proj: Vec<DVector<f64>> = Vec::with_capacity(mesh.n_elements());
    let mut p_mean = 0.0;
    let mut total_area = 0.0;
    for e in 0..mesh.n_elements() {
        let ls = &sol.spaces[e].scalar;
        let proj = localops::project_onto_w(ls, |x| (exact.pressure)(x));
        let one = localops::project_onto_w(ls, |_| 1.0);
        p_mean += one.dot(&proj);
        total_area += ls.geom.area;
        p_proj.push(proj);
    }
    let shift = p_mean / total_area;

    let nu = sol.nu;
    let mut e_l_sq = 0.0;
    let mut e_u_sq = 0.0;
    let mut e_p_sq = 0.0;
    let mut e_h1_sq = 0.0;
    let mut e_pf_sq = 0.0;
    let mut e_l0_sq = 0.0;
    let mut theta_faces = 0.0;
    let mut delta_l0_sq = 0.0;
    let mut u_inf: f64 = 0.0;

    for e in 0..mesh.n_elements() {
        let ls = &sol.spaces[e].scalar;
        let class = &ls.class;
        let uh = sol.uhat_components(mesh, e);

        // projections of the exact fields on this element
        let pl = [
            l2_project_v(ls, |x| (exact.gradient)(x)[0]),
            l2_project_v(ls, |x| (exact.gradient)(x)[1]),
        ];
        let piu = [
            project_pi_w(ls, |x| (exact.velocity)(x)[0])?,
            project_pi_w(ls, |x| (exact.velocity)(x)[1])?,
        ];
        let pm = [
            localops::project_onto_m(ls, |x| (exact.velocity)(x)[0]),
            localops::project_onto_m(ls, |x| (exact.velocity)(x)[1]),
        ];
        let one = localops::project_onto_w(ls, |_| 1.0);
        let pq = &p_proj[e] - shift * &one;

        let dp_coeff = &pq - &sol.p[e];
        e_p_sq += dp_coeff.dot(&dp_coeff);

        for i in 0..2 {
            let dl = &pl[i] - &sol.l[e][i];
            e_l_sq += dl.dot(&dl);
            let du = &piu[i] - &sol.u[e][i];
            e_u_sq += du.dot(&du);
            let duh = &pm[i] - &uh[i];
            e_h1_sq += seminorm_sq(ls, &du, &duh, SeminormMode::H1);
            e_pf_sq += seminorm_sq(ls, &du, &duh, SeminormMode::Pf);
            e_l0_sq += seminorm_sq(ls, &du, &duh, SeminormMode::L0);
        }

        // Theta_ns face terms: h_K (||nu delta_L n||^2 + ||delta_p||^2)
        for lf in 0..ls.n_faces() {
            let pts = ls.face_points_phys(lf);
            let loc: Vec<[f64; 2]> = pts.iter().map(|&x| ls.geom.local(x)).collect();
            let plx_vals = eval_vector(ls, &pl[0], &class.v, &loc);
            let ply_vals = eval_vector(ls, &pl[1], &class.v, &loc);
            let pq_vals = eval_scalar(ls, &pq, &class.w, &loc);
            let nrm = ls.geom.normals[lf];
            for (q, (&w, x)) in class.face_w[lf].iter().zip(&pts).enumerate() {
                let gex = (exact.gradient)(*x);
                let dl = [
                    [gex[0][0] - plx_vals[q][0], gex[0][1] - plx_vals[q][1]],
                    [gex[1][0] - ply_vals[q][0], gex[1][1] - ply_vals[q][1]],
                ];
                let dln = [
                    dl[0][0] * nrm[0] + dl[0][1] * nrm[1],
                    dl[1][0] * nrm[0] + dl[1][1] * nrm[1],
                ];
                let dp = (exact.pressure)(*x) - pq_vals[q];
                theta_faces +=
                    ls.h() * w * (nu * nu * (dln[0] * dln[0] + dln[1] * dln[1]) + dp * dp);
            }
        }

        // |||(delta_u, delta_uhat)|||_0 per component and the sup estimate
        let vol_pts = ls.vol_points_phys();
        let loc_vol: Vec<[f64; 2]> = vol_pts.iter().map(|&x| ls.geom.local(x)).collect();
        for i in 0..2 {
            let piu_vals = eval_scalar(ls, &piu[i], &class.w, &loc_vol);
            let mut vol = 0.0;
            for (q, (&w, x)) in class.vol_w.iter().zip(&vol_pts).enumerate() {
                let uex = (exact.velocity)(*x)[i];
                let d = uex - piu_vals[q];
                vol += w * d * d;
                u_inf = u_inf.max(uex.abs());
            }
            let mut bdry_hat = 0.0;
            let mut bdry_jump = 0.0;
            for lf in 0..ls.n_faces() {
                let pts = ls.face_points_phys(lf);
                let locf: Vec<[f64; 2]> = pts.iter().map(|&x| ls.geom.local(x)).collect();
                let piu_face = eval_scalar(ls, &piu[i], &class.w, &locf);
                let mf = &class.tab.m_face[lf];
                let off = class.m.offsets[lf];
                for (q, (&w, x)) in class.face_w[lf].iter().zip(&pts).enumerate() {
                    let uex = (exact.velocity)(*x)[i];
                    let mut pmv = 0.0;
                    for a in 0..mf.nrows() {
                        pmv += pm[i][off + a] * mf[(a, q)];
                    }
                    let dhat = uex - pmv;
                    let dval = uex - piu_face[q];
                    bdry_hat += w * dhat * dhat;
                    bdry_jump += w * (dval - dhat) * (dval - dhat);
                }
            }
            delta_l0_sq += vol + ls.h() * (bdry_hat + bdry_jump);
        }
        for v in &ls.geom.vertices {
            let uex = (exact.velocity)(*v);
            u_inf = u_inf.max(uex[0].abs()).max(uex[1].abs());
        }
    }
    let theta_ns = theta_faces + u_inf * u_inf * delta_l0_sq;
    let h = mesh.h();
    let lhs_energy = e_l_sq.sqrt() + e_h1_sq.sqrt() + e_l0_sq.sqrt() / h + e_u_sq.sqrt();
    let ratio_energy_bound = lhs_energy / ((1.0 / nu) * theta_ns.sqrt()).max(1e-300);
    let h1_norm = sol.h1_norm_sq(mesh).sqrt();

    Ok(NsErrorRow {
        n,
        h,
        dofs,
        err_l: el2.sqrt(),
        err_u: eu2.sqrt(),
        err_p: ep2.sqrt(),
        e_l: e_l_sq.sqrt(),
        e_u: e_u_sq.sqrt(),
        e_h1: e_h1_sq.sqrt(),
        e_pf_scaled: e_pf_sq.sqrt() / h,
        e_l0: e_l0_sq.sqrt(),
        max_div_beta: sol.max_div_beta(),
        energy: sol.energy(mesh),
        theta_ns_sqrt: theta_ns.sqrt(),
        ratio_energy_bound,
        stability_ratio: nu * h1_norm / f_norm.max(1e-300),
        quadrature_drift,
        picard_iterations: trace.records.len().saturating_sub(1),
    })
}

/// Output of one study level: the error row plus the artifacts needed for
/// further invariant checks.
pub struct NsStudyLevel {
    pub row: NsErrorRow,
    pub trace: PicardTrace,
    pub sol: NsSolution,
    pub mesh: Mesh,
}

/// Solves one refinement level of the manufactured Navier-Stokes (or
/// Stokes) study and measures its errors.
#[allow(clippy::too_many_arguments)]
pub fn ns_study_level(
    family: Family,
    k: u32,
    n: usize,
    exact: &NsExact,
    stokes_only: bool,
    tol: f64,
    max_iter: usize,
    omega: f64,
) -> Result<NsStudyLevel> {
    let mesh = Mesh::unit_square(family.shape(), n)?;
    let forcing = if stokes_only {
        exact.forcing_stokes.clone()
    } else {
        exact.forcing.clone()
    };
    let vel = exact.velocity.clone();
    let f = move |p: [f64; 2]| forcing(p);
    let g = move |p: [f64; 2]| vel(p);
    let problem = NsProblem {
        mesh: &mesh,
        family,
        k,
        nu: exact.nu,
        f: &f,
        g: Some(&g),
        tol,
        max_iter: if stokes_only { 1 } else { max_iter },
        omega,
    };
    let (sol, trace) = if stokes_only {
        // a single Oseen solve with beta = 0 is the Stokes solution; run
        // the Picard driver for one iteration with the convective forcing off
        crate::navierstokes::solve_stokes(&problem)?
    } else {
        crate::navierstokes::solve_navier_stokes(&problem)?
    };
    // ||f|| over the domain
    let mut f_norm_sq = 0.0;
    for e in 0..mesh.n_elements() {
        let ls = &sol.spaces[e].scalar;
        let pts = ls.vol_points_phys();
        for (&w, x) in ls.class.vol_w.iter().zip(&pts) {
            let fv = (problem.f)(*x);
            f_norm_sq += w * (fv[0] * fv[0] + fv[1] * fv[1]);
        }
    }
    let nmf = k as usize + 1;
    let dofs = mesh.faces.iter().filter(|f| !f.is_boundary()).count() * 2 * nmf
        + mesh.n_elements()
        + 1;
    let row = ns_error_row(&mesh, &sol, exact, &trace, n, dofs, f_norm_sq.sqrt())?;
    Ok(NsStudyLevel {
        row,
        trace,
        sol,
        mesh,
    })
}
