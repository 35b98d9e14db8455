//! Acceptance suite: every criterion is one test that prints a PASS/FAIL
//! line. Tolerances and thresholds are pinned in code.

use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use hdg2d::analysis::{manufactured_problem, ns_study_level, NsStudyLevel};
use hdg2d::localops::{self, AlphaMode, Coefficient, Material};
use hdg2d::mdecomp;
use hdg2d::mesh::{ElementGeom, Mesh, Shape};
use hdg2d::navierstokes::structural_invariants;
use hdg2d::spaces::{Family, LocalSpaces, SpaceCache};

fn unit_element(family: Family) -> ElementGeom {
    match family.shape() {
        Shape::Triangle => {
            ElementGeom::standalone(Shape::Triangle, vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        }
        Shape::Square => ElementGeom::standalone(
            Shape::Square,
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
        ),
    }
}

fn family_degree_range(family: Family) -> std::ops::RangeInclusive<u32> {
    family.min_degree()..=3
}

fn report_line(criterion: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{criterion} failed: {detail}");
}

/// Shared Navier-Stokes solves for criteria 5-7.
fn ns_level(k: u32, n: usize) -> Arc<NsStudyLevel> {
    static CACHE: OnceLock<Mutex<std::collections::HashMap<(u32, usize), Arc<NsStudyLevel>>>> =
        OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(std::collections::HashMap::new()));
    if let Some(hit) = cache.lock().unwrap().get(&(k, n)) {
        return Arc::clone(hit);
    }
    let exact = manufactured_problem("trig", 1.0).unwrap();
    let out = ns_study_level(Family::Hdg, k, n, &exact, false, 1e-10, 30, 1.0).unwrap();
    let arc = Arc::new(out);
    cache.lock().unwrap().insert((k, n), Arc::clone(&arc));
    arc
}

#[test]
fn criterion_1_mdecomposition_certification() {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut all = true;
    for family in Family::ALL {
        for k in family_degree_range(family) {
            let ls = LocalSpaces::build(family, k, &unit_element(family)).unwrap();
            let mut rep = mdecomp::verify_mdecomposition(&ls);
            rep.checks
                .extend(mdecomp::verify_pp_space(&ls).unwrap().checks);
            all &= rep.all_pass();
            worst = worst.max(rep.max_residual());
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = all && worst <= 1e-9 && elapsed < 10.0;
    report_line(
        "criterion 1 (M-decomposition certification)",
        pass,
        &format!("max residual {worst:.3e}, {elapsed:.1}s"),
    );
}

#[test]
fn criterion_2_inequality_constant_suite() {
    let t0 = Instant::now();
    let mut pass = true;
    let mut detail = String::new();
    for family in Family::ALL {
        for k in family_degree_range(family) {
            let base_geom = unit_element(family);
            let ls = LocalSpaces::build(family, k, &base_geom).unwrap();
            let base = mdecomp::inequality_constants(&ls, Material::identity()).unwrap();
            pass &= base.kernel_residual <= 1e-9;

            // scaling invariance
            for s in [0.5, 0.25] {
                let verts: Vec<[f64; 2]> = base_geom
                    .vertices
                    .iter()
                    .map(|v| [v[0] * s, v[1] * s])
                    .collect();
                let geom = ElementGeom::standalone(family.shape(), verts);
                let c = mdecomp::inequality_constants(
                    &LocalSpaces::build(family, k, &geom).unwrap(),
                    Material::identity(),
                )
                .unwrap();
                pass &= (c.c_h1 - base.c_h1).abs() <= 1e-8 * base.c_h1;
                pass &= (c.c_pf - base.c_pf).abs() <= 1e-8 * base.c_pf;
            }
            // rigid motion invariance
            let (co, si) = (0.35f64.cos(), 0.35f64.sin());
            let verts: Vec<[f64; 2]> = base_geom
                .vertices
                .iter()
                .map(|v| [co * v[0] - si * v[1] + 0.4, si * v[0] + co * v[1] - 0.2])
                .collect();
            let geom = ElementGeom::standalone(family.shape(), verts);
            let c = mdecomp::inequality_constants(
                &LocalSpaces::build(family, k, &geom).unwrap(),
                Material::identity(),
            )
            .unwrap();
            pass &= (c.c_h1 - base.c_h1).abs() <= 1e-8 * base.c_h1;
            pass &= (c.c_pf - base.c_pf).abs() <= 1e-8 * base.c_pf;

            // stability of the global (max-over-elements) constant across
            // three refinement levels
            if k <= 1 {
                let mut per_level = Vec::new();
                for n in [2usize, 4, 8] {
                    let mesh = Mesh::unit_square(family.shape(), n).unwrap();
                    let mut cache = SpaceCache::new();
                    let mut seen = std::collections::HashSet::new();
                    let mut worst: f64 = 0.0;
                    for e in 0..mesh.n_elements() {
                        let g = mesh.element_geom(e);
                        if seen.insert(g.class_key()) {
                            let lse = cache.get(family, k, &g).unwrap();
                            let ce =
                                mdecomp::inequality_constants(&lse, Material::identity()).unwrap();
                            worst = worst.max(ce.c_h1);
                        }
                    }
                    per_level.push(worst);
                }
                let lo = per_level.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = per_level.iter().cloned().fold(0.0_f64, f64::max);
                if hi > lo * 1.10 {
                    pass = false;
                    detail = format!("{family} k={k}: constants spread {lo:.4}..{hi:.4}");
                }
            }
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    pass &= elapsed < 30.0;
    if detail.is_empty() {
        detail = format!("{elapsed:.1}s");
    }
    report_line("criterion 2 (Theorem 2.3 constants)", pass, &detail);
}

#[test]
fn criterion_3_condensation_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for family in Family::ALL {
        let k = family.min_degree().max(1);
        let ls = LocalSpaces::build(family, k, &unit_element(family)).unwrap();
        let alpha = if ls.class.ms.total > 0 {
            AlphaMode::Minimal
        } else {
            AlphaMode::Zero
        };
        let class = &ls.class;
        let tab = &class.tab;
        let (nv, nw, nm) = (ls.nv(), ls.nw(), ls.nm());
        for _ in 0..100 {
            let f_vals: Vec<f64> = (0..class.vol_w.len())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let uhat = DVector::from_fn(nm, |_, _| rng.gen_range(-1.0..1.0));
            let ops = localops::assemble_local_diffusion(&ls, &Coefficient::identity(), alpha, &f_vals)
                .unwrap();
            let (q_c, u_c) = ops.reconstruct(&uhat, nv);

            // monolithic dense oracle: raw quadrature assembly of the full
            // (q, u) system with uhat data
            let mut gram = DMatrix::zeros(nv, nv);
            let mut dmat = DMatrix::zeros(nv, nw);
            for (col, &w) in class.vol_w.iter().enumerate() {
                for i in 0..nv {
                    for j in 0..nv {
                        gram[(i, j)] += w
                            * (tab.v_x[(i, col)] * tab.v_x[(j, col)]
                                + tab.v_y[(i, col)] * tab.v_y[(j, col)]);
                    }
                    for m in 0..nw {
                        dmat[(i, m)] += w * tab.v_div[(i, col)] * tab.w_vol[(m, col)];
                    }
                }
            }
            let mut tmat = DMatrix::zeros(nv, nm);
            let mut e1 = DMatrix::zeros(nw, nv);
            for lf in 0..ls.n_faces() {
                let off = class.m.offsets[lf];
                for (col, &w) in class.face_w[lf].iter().enumerate() {
                    for i in 0..nv {
                        for l in 0..tab.m_face[lf].nrows() {
                            tmat[(i, off + l)] +=
                                w * tab.v_n_face[lf][(i, col)] * tab.m_face[lf][(l, col)];
                        }
                        for m in 0..nw {
                            e1[(m, i)] += w * tab.v_n_face[lf][(i, col)] * tab.w_face[lf][(m, col)];
                        }
                    }
                }
            }
            for (col, &w) in class.vol_w.iter().enumerate() {
                for m in 0..nw {
                    for i in 0..nv {
                        e1[(m, i)] -= w
                            * (tab.v_x[(i, col)] * tab.w_gx[(m, col)]
                                + tab.v_y[(i, col)] * tab.w_gy[(m, col)]);
                    }
                }
            }
            // alpha terms via the M_S projection
            let (ju, jm) = localops::ms_jump_map(&ls);
            let hinv = 1.0 / ls.h();
            let auu = match alpha {
                AlphaMode::Minimal => hinv * ju.transpose() * &ju,
                _ => DMatrix::zeros(nw, nw),
            };
            let aum = match alpha {
                AlphaMode::Minimal => hinv * ju.transpose() * &jm,
                _ => DMatrix::zeros(nw, nm),
            };
            let n = nv + nw;
            let mut lambda = DMatrix::zeros(n, n);
            lambda.view_mut((0, 0), (nv, nv)).copy_from(&gram);
            lambda.view_mut((0, nv), (nv, nw)).copy_from(&(-&dmat));
            lambda.view_mut((nv, 0), (nw, nv)).copy_from(&e1);
            lambda.view_mut((nv, nv), (nw, nw)).copy_from(&auu);
            let mut rhs = DVector::zeros(n);
            let top = -&tmat * &uhat;
            rhs.rows_mut(0, nv).copy_from(&top);
            let mut fw = DVector::zeros(nw);
            for (col, &w) in class.vol_w.iter().enumerate() {
                for m in 0..nw {
                    fw[m] += w * tab.w_vol[(m, col)] * f_vals[col];
                }
            }
            let bottom = &fw + &aum * &uhat;
            rhs.rows_mut(nv, nw).copy_from(&bottom);
            let sol = lambda.full_piv_lu().solve(&rhs).unwrap();
            let q_o = sol.rows(0, nv);
            let u_o = sol.rows(nv, nw);
            let scale = sol.amax().max(1.0);
            worst = worst.max((&q_c - q_o).amax() / scale);
            worst = worst.max((&u_c - u_o).amax() / scale);
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let pass = worst <= 1e-12 && elapsed < 10.0;
    report_line(
        "criterion 3 (condensed = monolithic oracle)",
        pass,
        &format!("max relative deviation {worst:.3e}, {elapsed:.1}s"),
    );
}

#[test]
fn criterion_4_diffusion_convergence() {
    let t0 = Instant::now();
    let mut pass = true;
    let mut detail = String::new();
    for (family, alpha) in [(Family::Rt, AlphaMode::Zero), (Family::Hdg, AlphaMode::Minimal)] {
        let k = 1;
        let mut errs = Vec::new();
        for n in [4usize, 8, 16, 32] {
            let (row, diag) =
                hdg2d::diffusion::manufactured_diffusion_level(family, k, n, alpha).unwrap();
            pass &= diag.conservation <= 1e-11;
            errs.push(row);
        }
        let order_q = (errs[2].err_q / errs[3].err_q).log2();
        let order_u = (errs[2].err_u / errs[3].err_u).log2();
        let lo = k as f64 + 1.0 - 0.2;
        let hi = k as f64 + 1.0 + 0.3;
        let ok = order_q >= lo && order_q <= hi && order_u >= lo && order_u <= hi;
        pass &= ok;
        detail.push_str(&format!("{family}: q {order_q:.2} u {order_u:.2}; "));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    pass &= elapsed < 120.0;
    detail.push_str(&format!("{elapsed:.1}s"));
    report_line("criterion 4 (diffusion rates)", pass, &detail);
}

fn ns_rates_for_k(k: u32) {
    let t0 = Instant::now();
    let levels = [4usize, 8, 16, 32];
    let rows: Vec<_> = levels.iter().map(|&n| ns_level(k, n)).collect();
    let last = &rows[rows.len() - 1].row;
    let prev = &rows[rows.len() - 2].row;
    let rate = |a: f64, b: f64| (a / b).log2();
    let r_l = rate(prev.err_l, last.err_l);
    let r_u = rate(prev.err_u, last.err_u);
    let r_p = rate(prev.err_p, last.err_p);
    let r_eu = rate(prev.e_u, last.e_u);
    let r_pf = rate(prev.e_pf_scaled, last.e_pf_scaled);
    let kf = k as f64;
    let mut pass = r_l >= kf + 0.8 && r_u >= kf + 0.8 && r_p >= kf + 0.8;
    pass &= r_eu >= kf + 1.8;
    pass &= r_pf >= kf + 0.8;
    let elapsed = t0.elapsed().as_secs_f64();
    pass &= elapsed < 600.0;
    report_line(
        &format!("criterion 5 (NS rates, k = {k})"),
        pass,
        &format!(
            "L {r_l:.2} u {r_u:.2} p {r_p:.2} e_u {r_eu:.2} pf {r_pf:.2}, {elapsed:.1}s"
        ),
    );
}

#[test]
fn criterion_5_ns_rates_k1() {
    ns_rates_for_k(1);
}

#[test]
fn criterion_5_ns_rates_k2() {
    ns_rates_for_k(2);
}

#[test]
fn criterion_6_structural_invariants() {
    let mut pass = true;
    let mut detail = String::new();
    for (k, n) in [(1u32, 8usize), (2, 8)] {
        let level = ns_level(k, n);
        let inv = structural_invariants(&level.mesh, &level.sol, &level.trace, 99);
        pass &= inv.all_pass();
        detail.push_str(&format!(
            "k={k}: div {:.1e} jump {:.1e} mean {:.1e} energy {:.1e} oh {:.1e}; ",
            inv.div_beta_rel,
            inv.beta_jump_rel,
            inv.pressure_mean_rel,
            inv.energy_slack.max(0.0),
            inv.oh_identity_gap
        ));
    }
    report_line("criterion 6 (NS structural invariants)", pass, &detail);
}

#[test]
fn criterion_7_fixed_point_behavior() {
    let mut pass = true;
    let mut stability = Vec::new();
    let mut detail = String::new();
    for n in [4usize, 8, 16] {
        let level = ns_level(1, n);
        let trace = &level.trace;
        pass &= trace.converged;
        pass &= trace.records.len() - 1 <= 30;
        // contraction ratios below one and geometric decay after warmup
        for r in trace.records.iter().skip(2) {
            if let Some(ratio) = r.ratio {
                pass &= ratio < 1.0;
            }
        }
        stability.push(level.row.stability_ratio);
    }
    let lo = stability.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = stability.iter().cloned().fold(0.0_f64, f64::max);
    pass &= hi <= 2.0 * lo;
    detail.push_str(&format!(
        "stability ratio in [{lo:.3}, {hi:.3}], iterations {}",
        ns_level(1, 16).row.picard_iterations
    ));
    report_line("criterion 7 (Picard contraction)", pass, &detail);
}

#[test]
fn criterion_8_nonreproducible_content_declared() {
    // The source paper publishes no numerical tables; every quantitative
    // check here is property- or rate-based. The external H(div)
    // post-processing u*_h (defined in a companion work) is out of scope;
    // the shipped divergence-free reconstruction is the convective-velocity
    // post-processing measured in criteria 5-6.
    report_line(
        "criterion 8 (non-reproducible content declared)",
        true,
        "no paper tables to reproduce; external u*_h post-processing excluded",
    );
}
