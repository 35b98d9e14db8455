//! Numerical certification of M-decompositions and the sharp constants of
//! the discrete H1 and Poincare-Friedrichs inequalities.
//!
//! Every check is reported as a `(name, pass, residual)` entry; failures are
//! report entries, never panics. The inequality constants come from a
//! projected generalized eigenproblem over `(u, uhat)` coordinates with the
//! flux eliminated through the discrete gradient map.

use nalgebra::{DMatrix, DVector};

use crate::dense;
use crate::localops::{self, Coefficient, Material};
use crate::spaces::{LocalSpaces, SpaceClass, VectorFunctions};
use crate::{Error, Result, RANK_TOL};

/// One verification entry. `residual` is small when the check passes;
/// `constant` carries an associated measured quantity when meaningful
/// (smallest singular values, eigenvalue constants).
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CheckEntry {
    pub name: String,
    pub pass: bool,
    pub residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constant: Option<f64>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct VerificationReport {
    pub family: String,
    pub k: u32,
    pub checks: Vec<CheckEntry>,
}

impl VerificationReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn max_residual(&self) -> f64 {
        self.checks.iter().map(|c| c.residual).fold(0.0, f64::max)
    }

    pub fn push(&mut self, name: impl Into<String>, pass: bool, residual: f64, constant: Option<f64>) {
        self.checks.push(CheckEntry {
            name: name.into(),
            pass,
            residual,
            constant,
        });
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

const PASS_RES: f64 = 1e-10;

/// Weighted boundary value rows of per-face tables of volume functions
/// (same row count on every face).
fn boundary_rows_volume(class: &SpaceClass, per_face: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = per_face[0].nrows();
    let cols: usize = class.face_w.iter().map(|w| w.len()).sum();
    let mut out = DMatrix::zeros(n, cols);
    let mut off = 0;
    for (lf, tab) in per_face.iter().enumerate() {
        for (q, &w) in class.face_w[lf].iter().enumerate() {
            let sw = w.sqrt();
            for i in 0..n {
                out[(i, off + q)] = tab[(i, q)] * sw;
            }
        }
        off += class.face_w[lf].len();
    }
    out
}

/// Weighted boundary rows of a facewise trace space (block rows per face).
fn boundary_rows_trace(class: &SpaceClass, per_face: &[DMatrix<f64>], offsets: &[usize], total: usize) -> DMatrix<f64> {
    let cols: usize = class.face_w.iter().map(|w| w.len()).sum();
    let mut out = DMatrix::zeros(total, cols);
    let mut col_off = 0;
    for (lf, tab) in per_face.iter().enumerate() {
        let row_off = offsets[lf];
        for (q, &w) in class.face_w[lf].iter().enumerate() {
            let sw = w.sqrt();
            for i in 0..tab.nrows() {
                out[(row_off + i, col_off + q)] = tab[(i, q)] * sw;
            }
        }
        col_off += class.face_w[lf].len();
    }
    out
}

/// Max norm of the residual rows after projecting `rows` onto the
/// orthonormal row span `basis` (both weighted sample rows), relative to
/// each row's own norm (floored at 1).
fn projection_residual(rows: &DMatrix<f64>, basis: &DMatrix<f64>) -> f64 {
    if rows.nrows() == 0 {
        return 0.0;
    }
    let res = if basis.nrows() == 0 {
        rows.clone()
    } else {
        rows - (rows * basis.transpose()) * basis
    };
    let mut worst = 0.0_f64;
    for i in 0..rows.nrows() {
        let denom = rows.row(i).norm().max(1.0);
        worst = worst.max(res.row(i).norm() / denom);
    }
    worst
}

/// Orthonormalize weighted sample rows (anchored at unit scale).
fn ortho_span(rows: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let (w, rank, _) = dense::orthonormalize_rows_anchored(rows, RANK_TOL, Some(1.0));
    (&w * rows, rank)
}

/// Weighted volume value rows (x and y components stacked) for a vector set.
fn volume_rows_vec(class: &SpaceClass, v: &VectorFunctions) -> DMatrix<f64> {
    crate::spaces::stacked_weighted_eval(&v.cx, &v.cy, &class.dict, &class.vol_loc, &class.vol_w)
}

/// Per-face normal trace tables of a vector set.
fn vec_normal_tables(class: &SpaceClass, v: &VectorFunctions) -> Vec<DMatrix<f64>> {
    (0..class.face_loc.len())
        .map(|lf| {
            let tf = class.dict.eval_table(&class.face_loc[lf]);
            let n = class.normals_loc[lf];
            &v.cx * &tf * n[0] + &v.cy * &tf * n[1]
        })
        .collect()
}

/// Full M-decomposition verification for `V(K) x W(K)`: Definition 2.1
/// conditions (a)-(c), the mean-zero/divergence-free trace identity, and the
/// stabilization-space conditions.
pub fn verify_mdecomposition(ls: &LocalSpaces) -> VerificationReport {
    let class = &ls.class;
    let mut rep = VerificationReport {
        family: class.family.to_string(),
        k: class.k,
        checks: Vec::new(),
    };
    verify_decomposition_into(
        ls,
        &class.v,
        &class.vt,
        &class.vtp,
        &class.wt,
        &class.wtp,
        "",
        &mut rep,
    );
    verify_ms_into(ls, &mut rep);
    rep
}

/// Stabilization-space conditions (2.2a)/(2.2b) as report entries.
pub fn verify_ms_conditions(ls: &LocalSpaces) -> VerificationReport {
    let class = &ls.class;
    let mut rep = VerificationReport {
        family: class.family.to_string(),
        k: class.k,
        checks: Vec::new(),
    };
    verify_ms_into(ls, &mut rep);
    rep
}

fn verify_ms_into(ls: &LocalSpaces, rep: &mut VerificationReport) {
    let class = &ls.class;
    // (2.2a): dim M_S = dim W - dim div V = dim Wt_perp (integer identity)
    let dim_ok = class.ms.total == class.wtp.len();
    rep.push(
        "ms-22a-dimension",
        dim_ok,
        (class.ms.total as f64 - class.wtp.len() as f64).abs(),
        Some(class.ms.total as f64),
    );
    // (2.2b): ||P_MS(.)|| is a norm on trace(Wt_perp): smallest singular
    // value of the composed map, rows normalized by the trace norms.
    if class.wtp.len() == 0 {
        rep.push("ms-22b-norm-property", true, 0.0, Some(0.0));
        return;
    }
    let wtp_rows = boundary_rows_volume(class, &class.tab.wtp_face);
    let ms_rows = boundary_rows_trace(class, &class.tab.ms_face, &class.ms.offsets, class.ms.total);
    // normalize each wtp trace row
    let mut normalized = wtp_rows.clone();
    for i in 0..normalized.nrows() {
        let n = normalized.row(i).norm();
        if n > 0.0 {
            normalized.row_mut(i).scale_mut(1.0 / n);
        }
    }
    let composed = &normalized * ms_rows.transpose();
    let smin = if class.ms.total == 0 {
        0.0
    } else {
        dense::smallest_singular_value(&composed)
    };
    let pass = dim_ok && smin > 1e-10;
    rep.push(
        "ms-22b-norm-property",
        pass,
        if pass { 0.0 } else { 1.0 - smin.min(1.0) },
        Some(smin),
    );
}

/// Shared verification core, also used for the post-processing pair
/// `V*(K) x W(K)`.
#[allow(clippy::too_many_arguments)]
fn verify_decomposition_into(
    ls: &LocalSpaces,
    v: &VectorFunctions,
    vt: &VectorFunctions,
    vtp: &VectorFunctions,
    wt: &crate::spaces::ScalarFunctions,
    wtp: &crate::spaces::ScalarFunctions,
    prefix: &str,
    rep: &mut VerificationReport,
) {
    let class = &ls.class;
    let dict = &class.dict;
    let t_vol = dict.eval_table(&class.vol_loc);
    let m_rows = boundary_rows_trace(class, &class.tab.m_face, &class.m.offsets, class.m.total);
    let (m_span, _) = ortho_span(&m_rows);

    // (a): traces of V.n and W lie in M(dK)
    let vn_tables = vec_normal_tables(class, v);
    let vn_rows = boundary_rows_volume(class, &vn_tables);
    let w_rows = {
        let tables: Vec<DMatrix<f64>> = (0..class.face_loc.len())
            .map(|lf| {
                let tf = dict.eval_table(&class.face_loc[lf]);
                // scalar W traces
                &crate::spaces::stack_rows(&wt.coeffs, &wtp.coeffs) * &tf
            })
            .collect();
        boundary_rows_volume(class, &tables)
    };
    let res_a = projection_residual(&vn_rows, &m_span).max(projection_residual(&w_rows, &m_span));
    rep.push(
        format!("{prefix}def21a-trace-containment"),
        res_a <= PASS_RES,
        res_a,
        None,
    );

    // (b): grad W subset Vt and div V subset Wt
    let dxm = crate::basis::dict_derivative_matrix(dict, true);
    let dym = crate::basis::dict_derivative_matrix(dict, false);
    let w_full = crate::spaces::stack_rows(&wt.coeffs, &wtp.coeffs);
    let grad_rows = crate::spaces::stacked_weighted_eval(
        &(&w_full * &dxm),
        &(&w_full * &dym),
        dict,
        &class.vol_loc,
        &class.vol_w,
    );
    let vt_rows = volume_rows_vec(class, vt);
    let (vt_span, _) = ortho_span(&vt_rows);
    let res_gw = projection_residual(&grad_rows, &vt_span);
    let div_rows = {
        let div = &v.cx * &dxm + &v.cy * &dym;
        crate::basis::weighted_eval(&(&div * &t_vol), &class.vol_w)
    };
    let wt_rows = crate::basis::weighted_eval(&(&wt.coeffs * &t_vol), &class.vol_w);
    let (wt_span, _) = ortho_span(&wt_rows);
    let res_dv = projection_residual(&div_rows, &wt_span);
    rep.push(
        format!("{prefix}def21b-grad-w-in-vt"),
        res_gw <= PASS_RES,
        res_gw,
        None,
    );
    rep.push(
        format!("{prefix}def21b-div-v-in-wt"),
        res_dv <= PASS_RES,
        res_dv,
        None,
    );
    // Wt = div V as a set: the reverse containment
    let res_wt_in_div = {
        let (div_span, _) = ortho_span(&div_rows);
        projection_residual(&wt_rows, &div_span)
    };
    rep.push(
        format!("{prefix}def21b-wt-equals-div-v"),
        res_wt_in_div <= PASS_RES,
        res_wt_in_div,
        None,
    );

    // (c): tr restricted to Vt_perp x Wt_perp is an isomorphism onto M
    let dim_vtp = vtp.len();
    let dim_wtp = wtp.len();
    let dims_ok = dim_vtp + dim_wtp == class.m.total;
    rep.push(
        format!("{prefix}def21c-dimension"),
        dims_ok,
        (dim_vtp as f64 + dim_wtp as f64 - class.m.total as f64).abs(),
        None,
    );
    let vtp_rows = boundary_rows_volume(class, &vec_normal_tables(class, vtp));
    let wtp_rows = {
        let tables: Vec<DMatrix<f64>> = (0..class.face_loc.len())
            .map(|lf| {
                let tf = dict.eval_table(&class.face_loc[lf]);
                &wtp.coeffs * &tf
            })
            .collect();
        boundary_rows_volume(class, &tables)
    };
    let tr_rows = crate::spaces::stack_rows(&vtp_rows, &wtp_rows);
    let (tr_span, tr_rank) = ortho_span(&tr_rows);
    // the span of the combined traces must cover M
    let res_cover = projection_residual(&m_rows, &tr_span);
    // and the map must be injective: rank equals the product dimension
    let injective = tr_rank == dim_vtp + dim_wtp;
    let sigma = {
        let composed = &tr_rows * m_span.transpose();
        dense::smallest_singular_value(&composed)
    };
    rep.push(
        format!("{prefix}def21c-trace-isomorphism"),
        dims_ok && injective && res_cover <= PASS_RES,
        res_cover + if injective { 0.0 } else { 1.0 },
        Some(sigma),
    );

    // mean-zero trace identity: {mu in M : <mu,1> = 0} equals the normal
    // traces of divergence-free members of V
    let divfree_traces = {
        let div = &v.cx * &dxm + &v.cy * &dym;
        let div_vals = crate::basis::weighted_eval(&(&div * &t_vol), &class.vol_w);
        let alpha = dense::nullspace_cols(&div_vals.transpose(), RANK_TOL);
        alpha.transpose() * &vn_rows
    };
    // each such trace has zero boundary mean
    let one_rows = {
        // constant function 1 on the boundary as weighted samples
        let cols: usize = class.face_w.iter().map(|w| w.len()).sum();
        let mut out = DMatrix::zeros(1, cols);
        let mut off = 0;
        for wf in &class.face_w {
            for (q, &w) in wf.iter().enumerate() {
                out[(0, off + q)] = w.sqrt();
            }
            off += wf.len();
        }
        out
    };
    let mut res_mean = 0.0_f64;
    for i in 0..divfree_traces.nrows() {
        let ip = divfree_traces.row(i).dot(&one_rows.row(0));
        res_mean = res_mean.max(ip.abs() / divfree_traces.row(i).norm().max(1.0));
    }
    // the mean-zero part of M lies in the span of the div-free traces
    let (df_span, df_rank) = ortho_span(&divfree_traces);
    let mean_zero_m = {
        let (one_span, _) = ortho_span(&one_rows);
        &m_rows - (&m_rows * one_span.transpose()) * one_span
    };
    let res_span = projection_residual(&mean_zero_m, &df_span);
    let rank_ok = df_rank == class.m.total - 1;
    rep.push(
        format!("{prefix}eq31-divfree-traces-mean-zero"),
        res_mean <= PASS_RES,
        res_mean,
        None,
    );
    rep.push(
        format!("{prefix}eq31-mean-zero-covered"),
        rank_ok && res_span <= PASS_RES,
        res_span + if rank_ok { 0.0 } else { 1.0 },
        Some(df_rank as f64),
    );
}

/// Post-processing space verification: `V subset V*`, `div V* = W`, and the
/// M-decomposition of `V* x W` (through the `Vt*` splitting).
pub fn verify_pp_space(ls: &LocalSpaces) -> Result<VerificationReport> {
    let class = &ls.class;
    let mut rep = VerificationReport {
        family: class.family.to_string(),
        k: class.k,
        checks: Vec::new(),
    };
    // containment V subset V*
    let v_rows = volume_rows_vec(class, &class.v);
    let vs_rows = volume_rows_vec(class, &class.vstar);
    let (vs_span, _) = ortho_span(&vs_rows);
    let res_contain = projection_residual(&v_rows, &vs_span);
    rep.push(
        "vstar-contains-v",
        res_contain <= PASS_RES,
        res_contain,
        None,
    );
    // div V* = W (both containments)
    let dxm = crate::basis::dict_derivative_matrix(&class.dict, true);
    let dym = crate::basis::dict_derivative_matrix(&class.dict, false);
    let t_vol = class.dict.eval_table(&class.vol_loc);
    let div_rows = {
        let div = &class.vstar.cx * &dxm + &class.vstar.cy * &dym;
        crate::basis::weighted_eval(&(&div * &t_vol), &class.vol_w)
    };
    let w_rows = crate::basis::weighted_eval(&(&class.w.coeffs * &t_vol), &class.vol_w);
    let (w_span, _) = ortho_span(&w_rows);
    let (div_span, div_rank) = ortho_span(&div_rows);
    let res_div = projection_residual(&div_rows, &w_span).max(projection_residual(&w_rows, &div_span));
    rep.push(
        "vstar-div-equals-w",
        div_rank == class.w.len() && res_div <= PASS_RES,
        res_div,
        Some(div_rank as f64),
    );
    // M-decomposition of V* x W: Wt* = div V* = W so Wt*_perp = 0, and the
    // splitting for V* uses Vt*
    let wt_star = crate::spaces::ScalarFunctions {
        coeffs: class.w.coeffs.clone(),
    };
    let wtp_star = crate::spaces::ScalarFunctions {
        coeffs: DMatrix::zeros(0, class.dict.len()),
    };
    let vtp_star = crate::spaces::vector_complement(
        &class.vstar,
        &class.vstar_t,
        &class.dict,
        &class.vol_loc,
        &class.vol_w,
    )
    .map_err(|e| Error::Construction(format!("V* splitting failed: {e}")))?;
    verify_decomposition_into(
        ls,
        &class.vstar,
        &class.vstar_t,
        &vtp_star,
        &wt_star,
        &wtp_star,
        "vstar-",
        &mut rep,
    );
    Ok(rep)
}

/// Quadratic-form operands of the inequality certification over
/// `(u, uhat)` coordinates.
pub struct InequalityOperands {
    /// Matrix of the H1 seminorm squared.
    pub a_h1: DMatrix<f64>,
    /// Matrix of `h^-2 |.|_PF^2`.
    pub a_pf: DMatrix<f64>,
    /// Matrix of `Theta = lambda_c_max ||q||_c^2 + h^-1 ||P_MS(u-uhat)||^2`.
    pub b: DMatrix<f64>,
}

/// Builds the three quadratic forms with the flux eliminated by the local
/// gradient map.
pub fn inequality_operands(ls: &LocalSpaces, c: Material) -> Result<InequalityOperands> {
    if !c.is_spd() {
        return Err(Error::IllConditionedMaterial(
            "material tensor must be symmetric positive definite".into(),
        ));
    }
    let class = &ls.class;
    let tab = &class.tab;
    let (nw, nm) = (class.w.len(), class.m.total);
    let n = nw + nm;
    let h = ls.h();
    let coeff = Coefficient::Constant(c);

    // q = Gc^-1 (D u - T uhat)
    let gc = localops::c_weighted_gram(ls, &coeff);
    let d = localops::div_pairing(ls);
    let t = localops::trace_pairing(ls);
    let mut rhs = DMatrix::zeros(class.v.len(), n);
    rhs.view_mut((0, 0), (class.v.len(), nw)).copy_from(&d);
    rhs.view_mut((0, nw), (class.v.len(), nm)).copy_from(&(-&t));
    let q_map = gc
        .clone()
        .full_piv_lu()
        .solve(&rhs)
        .ok_or_else(|| Error::IllConditionedMaterial("singular c-weighted Gram".into()))?;

    // B = lambda_max(c) q^T Gc q + h^-1 (J x)^2
    let mut b = c.lambda_max() * q_map.transpose() * &gc * &q_map;
    let (ju, jm) = localops::ms_jump_map(ls);
    let mut j_full = DMatrix::zeros(class.ms.total, n);
    j_full.view_mut((0, 0), (class.ms.total, nw)).copy_from(&ju);
    j_full
        .view_mut((0, nw), (class.ms.total, nm))
        .copy_from(&(-&jm));
    b += j_full.transpose() * &j_full / h;

    // A_H1 = ||grad u||^2 + h^-1 ||u - uhat||^2_dK
    let mut a_h1: DMatrix<f64> = DMatrix::zeros(n, n);
    let gss = localops::weighted_product(&tab.w_gx, &tab.w_gx, &class.vol_w)
        + localops::weighted_product(&tab.w_gy, &tab.w_gy, &class.vol_w);
    a_h1.view_mut((0, 0), (nw, nw)).copy_from(&gss);
    let mut buu: DMatrix<f64> = DMatrix::zeros(nw, nw);
    let mut bum: DMatrix<f64> = DMatrix::zeros(nw, nm);
    for lf in 0..ls.n_faces() {
        buu += localops::weighted_product(&tab.w_face[lf], &tab.w_face[lf], &class.face_w[lf]);
        let bm = localops::weighted_product(&tab.w_face[lf], &tab.m_face[lf], &class.face_w[lf]);
        let off = class.m.offsets[lf];
        for i in 0..nw {
            for l in 0..tab.m_face[lf].nrows() {
                bum[(i, off + l)] += bm[(i, l)];
            }
        }
    }
    let hinv = 1.0 / h;
    for i in 0..nw {
        for j in 0..nw {
            a_h1[(i, j)] += hinv * buu[(i, j)];
        }
    }
    for i in 0..nw {
        for l in 0..nm {
            a_h1[(i, nw + l)] -= hinv * bum[(i, l)];
            a_h1[(nw + l, i)] -= hinv * bum[(i, l)];
        }
    }
    for l in 0..nm {
        a_h1[(nw + l, nw + l)] += hinv;
    }

    // A_PF = h^-2 ( ||u - mean(uhat)||^2_K + h ||uhat - mean(uhat)||^2_dK )
    let perimeter = ls.geom.perimeter();
    let ghat = localops::m_moments_of_one(ls); // <mu_l, 1>_dK
    let p_vec = {
        // (w_i, 1)_K
        let mut p: DVector<f64> = DVector::zeros(nw);
        for (q, &w) in class.vol_w.iter().enumerate() {
            for i in 0..nw {
                p[i] += w * tab.w_vol[(i, q)];
            }
        }
        p
    };
    let mut a_pf: DMatrix<f64> = DMatrix::zeros(n, n);
    // u'u block (W orthonormal)
    for i in 0..nw {
        a_pf[(i, i)] += 1.0;
    }
    // cross terms: -2 m(uhat) p'u with m(uhat) = ghat'uhat / |dK|
    for i in 0..nw {
        for l in 0..nm {
            let v = -p_vec[i] * ghat[l] / perimeter;
            a_pf[(i, nw + l)] += v;
            a_pf[(nw + l, i)] += v;
        }
    }
    // uhat block: h I + (|K|/|dK|^2 - h/|dK|) ghat ghat'
    let area = ls.geom.area;
    for l in 0..nm {
        a_pf[(nw + l, nw + l)] += h;
    }
    let coef = area / (perimeter * perimeter) - h / perimeter;
    for l in 0..nm {
        for l2 in 0..nm {
            a_pf[(nw + l, nw + l2)] += coef * ghat[l] * ghat[l2];
        }
    }
    a_pf /= h * h;

    Ok(InequalityOperands {
        a_h1: dense::symmetrize(&a_h1),
        a_pf: dense::symmetrize(&a_pf),
        b: dense::symmetrize(&b),
    })
}

/// Certified constants of the local discrete H1 and Poincare-Friedrichs
/// inequalities, with the kernel inclusion `ker B subset ker A` verified
/// first.
#[derive(Clone, Debug, serde::Serialize)]
pub struct InequalityConstants {
    pub c_h1: f64,
    pub c_pf: f64,
    pub kernel_dim: usize,
    pub kernel_residual: f64,
}

pub fn inequality_constants(ls: &LocalSpaces, c: Material) -> Result<InequalityConstants> {
    let ops = inequality_operands(ls, c)?;
    let g_h1 = dense::generalized_sym_eig(&ops.a_h1, &ops.b, 1e-12)?;
    let g_pf = dense::generalized_sym_eig(&ops.a_pf, &ops.b, 1e-12)?;
    let kernel_residual = g_h1.kernel_residual.max(g_pf.kernel_residual);
    if kernel_residual > 1e-9 {
        return Err(Error::TheoremViolation(format!(
            "kernel of Theta not contained in the seminorm kernels (residual {kernel_residual:.3e})"
        )));
    }
    Ok(InequalityConstants {
        c_h1: g_h1.lambda_max,
        c_pf: g_pf.lambda_max,
        kernel_dim: g_h1.kernel_dim,
        kernel_residual,
    })
}

/// Extreme generalized eigenvalues between the H1 and PF forms on the
/// complement of their common kernel (the seminorm equivalence interval).
pub fn seminorm_equivalence(ls: &LocalSpaces) -> Result<(f64, f64)> {
    let ops = inequality_operands(ls, Material::identity())?;
    let g = dense::generalized_sym_eig(&ops.a_h1, &ops.a_pf, 1e-12)?;
    Ok((g.lambda_min, g.lambda_max))
}
