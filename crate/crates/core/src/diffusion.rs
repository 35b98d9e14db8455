//! Global HDG/mixed solver for steady diffusion by static condensation to
//! the trace space.
//!
//! The condensed system couples only the interior-face trace unknowns;
//! Dirichlet faces are eliminated by setting them to the facewise L2
//! projection of the boundary data. Assembly runs in parallel over elements
//! with a deterministic sequential reduction.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::analysis::{seminorm_sq, SeminormMode};

use crate::localops::{
    self, assemble_local_diffusion, AlphaMode, Coefficient, LocalOperatorSet,
};
use crate::mesh::Mesh;
use crate::sparse::SparseBuilder;
use crate::spaces::{Family, LocalSpaces, SpaceCache};
use crate::Result;

/// Linear solver choice for the condensed SPD trace system.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum TraceSolver {
    Direct,
    /// Diagonally preconditioned CG fallback for large meshes.
    Cg { rel_tol: f64, max_iter: usize },
}

impl Default for TraceSolver {
    fn default() -> Self {
        TraceSolver::Direct
    }
}

/// Solution fields of a diffusion solve: per-element `(q, u)` coefficient
/// blocks and per-face trace coefficients.
pub struct DiffusionSolution {
    pub family: Family,
    pub k: u32,
    pub alpha: AlphaMode,
    pub spaces: Vec<LocalSpaces>,
    pub q: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    /// Trace coefficients per global face (k + 1 each).
    pub uhat: Vec<DVector<f64>>,
}

impl DiffusionSolution {
    /// Stacked trace coefficients of one element (local face order).
    pub fn element_uhat(&self, mesh: &Mesh, e: usize) -> DVector<f64> {
        let nmf = self.k as usize + 1;
        let faces = &mesh.elem_faces[e];
        let mut out = DVector::zeros(nmf * faces.len());
        for (lf, &fid) in faces.iter().enumerate() {
            out.rows_mut(lf * nmf, nmf).copy_from(&self.uhat[fid]);
        }
        out
    }

    /// Triple-norm `|||(u, uhat)|||_{1,Th}^2`.
    pub fn h1_norm_sq(&self, mesh: &Mesh) -> f64 {
        (0..mesh.n_elements())
            .map(|e| {
                seminorm_sq(
                    &self.spaces[e],
                    &self.u[e],
                    &self.element_uhat(mesh, e),
                    SeminormMode::H1,
                )
            })
            .sum()
    }
}

/// Residuals and stability diagnostics attached to every solve.
#[derive(Clone, Debug, serde::Serialize)]
pub struct DiffusionDiagnostics {
    /// Relative residual of the local equations over all elements.
    pub local_residual: f64,
    /// Relative residual of the condensed global system.
    pub global_residual: f64,
    /// Boundary traces vs. the facewise projection of g.
    pub dirichlet_residual: f64,
    /// `max_K |<qhat.n, 1>_dK - (f, 1)_K|`.
    pub conservation: f64,
    /// Relative gap in the global energy identity.
    pub energy_identity_gap: f64,
    /// `|||(u,uhat)|||_1^2 / Theta_total` against the certified constant.
    pub h1_stability_ratio: f64,
    /// Certified `max_K C_H1` over the element classes (c = Id).
    pub c_h1_certified: f64,
    /// Largest local-solver condition estimate.
    pub max_local_cond: f64,
}

pub struct DiffusionProblem<'a> {
    pub mesh: &'a Mesh,
    pub family: Family,
    pub k: u32,
    pub c: Coefficient,
    pub f: &'a (dyn Fn([f64; 2]) -> f64 + Sync),
    pub g: &'a (dyn Fn([f64; 2]) -> f64 + Sync),
    pub alpha: AlphaMode,
    pub solver: TraceSolver,
}

/// Solves the diffusion system and verifies the residuals of all equations.
pub fn solve_diffusion(p: &DiffusionProblem) -> Result<(DiffusionSolution, DiffusionDiagnostics)> {
    let mesh = p.mesh;
    let mut cache = SpaceCache::new();
    let spaces = cache.for_mesh(mesh, p.family, p.k)?;
    let nmf = p.k as usize + 1;

    // per-element local operators (parallel, deterministic order kept)
    let ops: Vec<LocalOperatorSet> = spaces
        .par_iter()
        .map(|ls| {
            let pts = ls.vol_points_phys();
            let f_vals: Vec<f64> = pts.iter().map(|&x| (p.f)(x)).collect();
            assemble_local_diffusion(ls, &p.c, p.alpha, &f_vals)
        })
        .collect::<Result<Vec<_>>>()?;
    let max_local_cond = ops.iter().map(|o| o.cond).fold(0.0, f64::max);

    // global dof layout: interior faces get unknowns, Dirichlet faces are
    // set to the facewise projection of g
    let mut face_offset = vec![usize::MAX; mesh.n_faces()];
    let mut n_dofs = 0;
    for (fid, face) in mesh.faces.iter().enumerate() {
        if !face.is_boundary() {
            face_offset[fid] = n_dofs;
            n_dofs += nmf;
        }
    }
    let mut uhat: Vec<DVector<f64>> = vec![DVector::zeros(nmf); mesh.n_faces()];
    for (fid, face) in mesh.faces.iter().enumerate() {
        if face.is_boundary() {
            let e = face.left;
            let lf = mesh.elem_faces[e].iter().position(|&g| g == fid).unwrap();
            uhat[fid] = project_g_on_face(&spaces[e], lf, p.g);
        }
    }

    // assemble condensed system
    let mut builder = SparseBuilder::new(n_dofs);
    let mut rhs = vec![0.0; n_dofs];
    for e in 0..mesh.n_elements() {
        let faces = &mesh.elem_faces[e];
        let op = &ops[e];
        for (lfi, &fi) in faces.iter().enumerate() {
            if face_offset[fi] == usize::MAX {
                continue;
            }
            for a in 0..nmf {
                let row = face_offset[fi] + a;
                rhs[row] += op.schur_rhs[lfi * nmf + a];
                for (lfj, &fj) in faces.iter().enumerate() {
                    for b in 0..nmf {
                        let val = op.schur[(lfi * nmf + a, lfj * nmf + b)];
                        if face_offset[fj] == usize::MAX {
                            // Dirichlet column: move to the load
                            rhs[row] -= val * uhat[fj][b];
                        } else {
                            builder.add(row, face_offset[fj] + b, val);
                        }
                    }
                }
            }
        }
    }
    let matrix = builder.build()?;
    let solution = match p.solver {
        TraceSolver::Direct => matrix.solve_cholesky(&rhs)?,
        TraceSolver::Cg { rel_tol, max_iter } => matrix.solve_cg(&rhs, rel_tol, max_iter)?,
    };
    let global_residual = {
        let rn = matrix.residual_norm(&solution, &rhs);
        let bn = rhs.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-30);
        rn / bn.max(1.0)
    };
    for (fid, face) in mesh.faces.iter().enumerate() {
        if !face.is_boundary() {
            for a in 0..nmf {
                uhat[fid][a] = solution[face_offset[fid] + a];
            }
        }
    }

    // reconstruct element fields
    let mut q = Vec::with_capacity(mesh.n_elements());
    let mut u = Vec::with_capacity(mesh.n_elements());
    for e in 0..mesh.n_elements() {
        let mut local_uhat = DVector::zeros(nmf * mesh.elem_faces[e].len());
        for (lf, &fid) in mesh.elem_faces[e].iter().enumerate() {
            local_uhat.rows_mut(lf * nmf, nmf).copy_from(&uhat[fid]);
        }
        let (qe, ue) = ops[e].reconstruct(&local_uhat, spaces[e].nv());
        q.push(qe);
        u.push(ue);
    }

    let sol = DiffusionSolution {
        family: p.family,
        k: p.k,
        alpha: p.alpha,
        spaces,
        q,
        u,
        uhat,
    };
    let diag = diagnostics(&sol, mesh, p, &ops, global_residual, max_local_cond, &mut cache)?;
    Ok((sol, diag))
}

/// Facewise L2 projection of g onto the trace basis of one face.
pub fn project_g_on_face(
    ls: &LocalSpaces,
    lf: usize,
    g: &(dyn Fn([f64; 2]) -> f64 + Sync),
) -> DVector<f64> {
    let class = &ls.class;
    let mf = &class.tab.m_face[lf];
    let pts = ls.face_points_phys(lf);
    let mut out = DVector::zeros(mf.nrows());
    for (qp, (&w, x)) in class.face_w[lf].iter().zip(&pts).enumerate() {
        let val = g(*x);
        for l in 0..mf.nrows() {
            out[l] += w * val * mf[(l, qp)];
        }
    }
    out
}

/// `max_K |<qhat.n, 1>_dK - (f, 1)_K|` over the mesh.
pub fn conservation_check(
    sol: &DiffusionSolution,
    mesh: &Mesh,
    c: &Coefficient,
    f: &(dyn Fn([f64; 2]) -> f64 + Sync),
) -> f64 {
    let mut worst = 0.0_f64;
    for e in 0..mesh.n_elements() {
        let ls = &sol.spaces[e];
        let pts = ls.vol_points_phys();
        let f_vals: Vec<f64> = pts.iter().map(|&x| f(x)).collect();
        let ops = assemble_local_diffusion(ls, c, sol.alpha, &f_vals).expect("local assembly");
        let local_uhat = sol.element_uhat(mesh, e);
        let flux = ops.flux_moments(&local_uhat);
        let ones = localops::m_moments_of_one(ls);
        let boundary_total = ones.dot(&flux);
        let f_total: f64 = ls
            .class
            .vol_w
            .iter()
            .zip(&f_vals)
            .map(|(&w, &fv)| w * fv)
            .sum();
        worst = worst.max((boundary_total - f_total).abs());
    }
    worst
}

#[allow(clippy::too_many_arguments)]
fn diagnostics(
    sol: &DiffusionSolution,
    mesh: &Mesh,
    p: &DiffusionProblem,
    ops: &[LocalOperatorSet],
    global_residual: f64,
    max_local_cond: f64,
    cache: &mut SpaceCache,
) -> Result<DiffusionDiagnostics> {
    // local equation residual: recompute (1.2a)-(1.2b) moments
    let mut local_residual = 0.0_f64;
    let mut conservation = 0.0_f64;
    let mut energy_total = 0.0;
    let mut f_u_total = 0.0;
    let mut boundary_data_total = 0.0;
    let mut h1_sq = 0.0;
    let mut theta_total = 0.0;
    for e in 0..mesh.n_elements() {
        let ls = &sol.spaces[e];
        let class = &ls.class;
        let pts = ls.vol_points_phys();
        let f_vals: Vec<f64> = pts.iter().map(|&x| (p.f)(x)).collect();
        let local_uhat = sol.element_uhat(mesh, e);
        let (qe, ue) = (&sol.q[e], &sol.u[e]);

        // (1.2a): (c q, v) - (u, div v) + <uhat, v.n> = 0
        let gc = localops::c_weighted_gram(ls, &p.c);
        let d = localops::div_pairing(ls);
        let t = localops::trace_pairing(ls);
        let res_a = (&gc * qe - &d * ue + &t * &local_uhat).amax();
        // (1.2b) via the flux moments identity: tested against W through the
        // reconstructed solve, so check the conservation statement instead
        let flux = ops[e].flux_moments(&local_uhat);
        let ones = localops::m_moments_of_one(ls);
        let f_total: f64 = class
            .vol_w
            .iter()
            .zip(&f_vals)
            .map(|(&w, &fv)| w * fv)
            .sum();
        conservation = conservation.max((ones.dot(&flux) - f_total).abs());
        let scale = qe.amax().max(ue.amax()).max(1.0);
        local_residual = local_residual.max(res_a / scale);

        // energy pieces
        let e_k = localops::local_energy(ls, &p.c, sol.alpha, qe, ue, &local_uhat);
        energy_total += e_k;
        let mut fu = 0.0;
        for (qp, &w) in class.vol_w.iter().enumerate() {
            let mut uval = 0.0;
            for i in 0..ls.nw() {
                uval += ue[i] * class.tab.w_vol[(i, qp)];
            }
            fu += w * uval * f_vals[qp];
        }
        f_u_total += fu;
        // boundary faces contribute <qhat.n, uhat>
        for (lf, &fid) in mesh.elem_faces[e].iter().enumerate() {
            if mesh.faces[fid].is_boundary() {
                let nmf = sol.k as usize + 1;
                let fl = flux.rows(lf * nmf, nmf);
                let uh = local_uhat.rows(lf * nmf, nmf);
                boundary_data_total += fl.dot(&uh);
            }
        }

        h1_sq += seminorm_sq(ls, ue, &local_uhat, SeminormMode::H1);
        // Theta_K = lambda_c_max ||q||_c^2 + h^-1 ||P_MS(u - uhat)||^2
        let lam_c = p.c.lambda_max_over(&pts);
        let qc = (qe.transpose() * &gc * qe)[(0, 0)];
        let (ju, jm) = localops::ms_jump_map(ls);
        let jump = &ju * ue - &jm * &local_uhat;
        theta_total += lam_c * qc + jump.dot(&jump) / ls.h();
    }
    // Dirichlet residual: boundary uhat equals the facewise projection
    let mut dirichlet_residual = 0.0_f64;
    for (fid, face) in mesh.faces.iter().enumerate() {
        if face.is_boundary() {
            let e = face.left;
            let lf = mesh.elem_faces[e].iter().position(|&g| g == fid).unwrap();
            let proj = project_g_on_face(&sol.spaces[e], lf, p.g);
            dirichlet_residual = dirichlet_residual.max((&sol.uhat[fid] - proj).amax());
        }
    }
    let energy_identity_gap =
        (energy_total - (f_u_total - boundary_data_total)).abs() / energy_total.abs().max(1.0);

    // certified constant: max over the distinct element classes
    let mut c_h1 = 0.0_f64;
    let mut seen = std::collections::HashSet::new();
    for e in 0..mesh.n_elements() {
        let key = mesh.element_geom(e).class_key();
        if seen.insert(key) {
            let ls = cache.get(p.family, p.k, &mesh.element_geom(e))?;
            let c = crate::mdecomp::inequality_constants(&ls, localops::Material::identity())?;
            c_h1 = c_h1.max(c.c_h1);
        }
    }
    let h1_stability_ratio = if theta_total > 0.0 { h1_sq / theta_total } else { 0.0 };

    Ok(DiffusionDiagnostics {
        local_residual,
        global_residual,
        dirichlet_residual,
        conservation,
        energy_identity_gap,
        h1_stability_ratio,
        c_h1_certified: c_h1,
        max_local_cond,
    })
}

/// One manufactured-solution study level: L2 errors of `q` and `u`.
#[derive(Clone, Debug, serde::Serialize)]
pub struct DiffusionErrors {
    pub n: usize,
    pub h: f64,
    pub trace_dofs: usize,
    pub err_q: f64,
    pub err_u: f64,
    pub conservation: f64,
}

/// Runs the manufactured diffusion problem `u = sin(pi x) sin(pi y)` with
/// `c = I` on the unit square and returns the error row.
pub fn manufactured_diffusion_level(
    family: Family,
    k: u32,
    n: usize,
    alpha: AlphaMode,
) -> Result<(DiffusionErrors, DiffusionDiagnostics)> {
    use std::f64::consts::PI;
    let mesh = Mesh::unit_square(family.shape(), n)?;
    let exact_u = |p: [f64; 2]| (PI * p[0]).sin() * (PI * p[1]).sin();
    let exact_q = |p: [f64; 2]| {
        [
            -PI * (PI * p[0]).cos() * (PI * p[1]).sin(),
            -PI * (PI * p[0]).sin() * (PI * p[1]).cos(),
        ]
    };
    let f = move |p: [f64; 2]| 2.0 * PI * PI * exact_u(p);
    let problem = DiffusionProblem {
        mesh: &mesh,
        family,
        k,
        c: Coefficient::identity(),
        f: &f,
        g: &exact_u,
        alpha,
        solver: TraceSolver::Direct,
    };
    let (sol, diag) = solve_diffusion(&problem)?;
    let (err_q, err_u) = field_errors(&sol, &mesh, &exact_q, &exact_u);
    Ok((
        DiffusionErrors {
            n,
            h: mesh.h(),
            trace_dofs: mesh.faces.iter().filter(|f| !f.is_boundary()).count() * (k as usize + 1),
            err_q,
            err_u,
            conservation: diag.conservation,
        },
        diag,
    ))
}

/// L2 errors of the flux and scalar fields against exact evaluators.
pub fn field_errors(
    sol: &DiffusionSolution,
    mesh: &Mesh,
    exact_q: &(dyn Fn([f64; 2]) -> [f64; 2] + Sync),
    exact_u: &(dyn Fn([f64; 2]) -> f64 + Sync),
) -> (f64, f64) {
    let mut eq = 0.0;
    let mut eu = 0.0;
    for e in 0..mesh.n_elements() {
        let ls = &sol.spaces[e];
        let class = &ls.class;
        let tab = &class.tab;
        let pts = ls.vol_points_phys();
        for (qp, (&w, x)) in class.vol_w.iter().zip(&pts).enumerate() {
            let mut qval = [0.0, 0.0];
            for i in 0..ls.nv() {
                qval[0] += sol.q[e][i] * tab.v_x[(i, qp)];
                qval[1] += sol.q[e][i] * tab.v_y[(i, qp)];
            }
            let qphys = ls.geom.vec_to_phys(qval);
            let qex = exact_q(*x);
            eq += w * ((qphys[0] - qex[0]).powi(2) + (qphys[1] - qex[1]).powi(2));
            let mut uval = 0.0;
            for i in 0..ls.nw() {
                uval += sol.u[e][i] * tab.w_vol[(i, qp)];
            }
            eu += w * (uval - exact_u(*x)).powi(2);
        }
    }
    (eq.sqrt(), eu.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Shape;

    #[test]
    fn zero_data_gives_zero_solution() {
        let mesh = Mesh::unit_square(Shape::Triangle, 2).unwrap();
        let f = |_: [f64; 2]| 0.0;
        let g = |_: [f64; 2]| 0.0;
        let problem = DiffusionProblem {
            mesh: &mesh,
            family: Family::Hdg,
            k: 1,
            c: Coefficient::identity(),
            f: &f,
            g: &g,
            alpha: AlphaMode::Minimal,
            solver: TraceSolver::Direct,
        };
        let (sol, _) = solve_diffusion(&problem).unwrap();
        for e in 0..mesh.n_elements() {
            assert!(sol.q[e].amax() < 1e-12);
            assert!(sol.u[e].amax() < 1e-12);
        }
    }

    #[test]
    fn linear_solution_reproduced_exactly() {
        // u = x + 2y: q is reproduced exactly by every family; u is exact
        // where W contains P_1 (all but BDM, whose W = P_{k-1} gives P_W u)
        let exact = |p: [f64; 2]| p[0] + 2.0 * p[1];
        let f = |_: [f64; 2]| 0.0;
        for family in [Family::Rt, Family::Hdg, Family::Bdm] {
            let mesh = Mesh::unit_square(Shape::Triangle, 2).unwrap();
            let alpha = if family == Family::Hdg {
                AlphaMode::Minimal
            } else {
                AlphaMode::Zero
            };
            let problem = DiffusionProblem {
                mesh: &mesh,
                family,
                k: 1,
                c: Coefficient::identity(),
                f: &f,
                g: &exact,
                alpha,
                solver: TraceSolver::Direct,
            };
            let (sol, diag) = solve_diffusion(&problem).unwrap();
            let eq = |p: [f64; 2]| {
                let _ = p;
                [-1.0, -2.0]
            };
            let (err_q, err_u) = field_errors(&sol, &mesh, &eq, &exact);
            assert!(err_q < 1e-10, "{family:?}: err_q = {err_q}");
            if family == Family::Bdm {
                // u_h equals the elementwise L2 projection of the exact u
                for e in 0..mesh.n_elements() {
                    let proj = crate::localops::project_onto_w(&sol.spaces[e], exact);
                    assert!((&sol.u[e] - proj).amax() < 1e-11);
                }
            } else {
                assert!(err_u < 1e-10, "{family:?}: err_u = {err_u}");
            }
            assert!(diag.conservation < 1e-11);
            assert!(diag.dirichlet_residual < 1e-12);
        }
    }

    #[test]
    fn square_families_reproduce_bilinear() {
        let exact = |p: [f64; 2]| 1.0 + p[0] - 0.5 * p[1];
        let f = |_: [f64; 2]| 0.0;
        for family in [Family::Tnt, Family::HdgQ, Family::BdmQ] {
            let mesh = Mesh::unit_square(Shape::Square, 2).unwrap();
            let alpha = if family == Family::HdgQ {
                AlphaMode::Minimal
            } else {
                AlphaMode::Zero
            };
            let problem = DiffusionProblem {
                mesh: &mesh,
                family,
                k: 1,
                c: Coefficient::identity(),
                f: &f,
                g: &exact,
                alpha,
                solver: TraceSolver::Direct,
            };
            let (sol, _) = solve_diffusion(&problem).unwrap();
            let eq = |_: [f64; 2]| [-1.0, 0.5];
            let (err_q, err_u) = field_errors(&sol, &mesh, &eq, &exact);
            assert!(err_q < 1e-10, "{family:?}: err_q = {err_q}");
            assert!(err_u < 1e-10, "{family:?}: err_u = {err_u}");
        }
    }

    #[test]
    fn manufactured_solution_diagnostics() {
        let (errs, diag) = manufactured_diffusion_level(Family::Rt, 1, 4, AlphaMode::Zero).unwrap();
        assert!(diag.local_residual < 1e-10);
        assert!(diag.global_residual < 1e-10);
        assert!(diag.conservation < 1e-11);
        assert!(diag.energy_identity_gap < 1e-10);
        // certified stability: |||.|||_1^2 <= C_H1 Theta
        assert!(
            diag.h1_stability_ratio <= diag.c_h1_certified * (1.0 + 1e-9),
            "{} vs {}",
            diag.h1_stability_ratio,
            diag.c_h1_certified
        );
        assert!(errs.err_q > 0.0 && errs.err_u > 0.0);
    }

    #[test]
    fn convergence_rate_is_second_order_for_k1() {
        // two-level check at modest sizes; the acceptance suite runs deeper
        let (e1, _) = manufactured_diffusion_level(Family::Rt, 1, 4, AlphaMode::Zero).unwrap();
        let (e2, _) = manufactured_diffusion_level(Family::Rt, 1, 8, AlphaMode::Zero).unwrap();
        let order_q = (e1.err_q / e2.err_q).log2();
        let order_u = (e1.err_u / e2.err_u).log2();
        assert!(order_q > 1.7 && order_q < 2.3, "order_q = {order_q}");
        assert!(order_u > 1.7 && order_u < 2.3, "order_u = {order_u}");
    }

    #[test]
    fn cg_fallback_matches_direct() {
        let (direct, _) =
            manufactured_diffusion_level(Family::Hdg, 1, 3, AlphaMode::Minimal).unwrap();
        use std::f64::consts::PI;
        let mesh = Mesh::unit_square(Shape::Triangle, 3).unwrap();
        let exact_u = |p: [f64; 2]| (PI * p[0]).sin() * (PI * p[1]).sin();
        let f = move |p: [f64; 2]| 2.0 * PI * PI * exact_u(p);
        let problem = DiffusionProblem {
            mesh: &mesh,
            family: Family::Hdg,
            k: 1,
            c: Coefficient::identity(),
            f: &f,
            g: &exact_u,
            alpha: AlphaMode::Minimal,
            solver: TraceSolver::Cg {
                rel_tol: 1e-13,
                max_iter: 10_000,
            },
        };
        let (sol, _) = solve_diffusion(&problem).unwrap();
        let exact_q = |p: [f64; 2]| {
            [
                -PI * (PI * p[0]).cos() * (PI * p[1]).sin(),
                -PI * (PI * p[0]).sin() * (PI * p[1]).cos(),
            ]
        };
        let (err_q, err_u) = field_errors(&sol, &mesh, &exact_q, &exact_u);
        assert!((err_q - direct.err_q).abs() < 1e-8 * direct.err_q.max(1e-12));
        assert!((err_u - direct.err_u).abs() < 1e-8 * direct.err_u.max(1e-12));
    }

    #[test]
    fn mixed_mode_alpha_zero_conserves_identically() {
        let (_, diag) = manufactured_diffusion_level(Family::Rt, 0, 4, AlphaMode::Zero).unwrap();
        assert!(diag.conservation < 1e-11);
    }
}
