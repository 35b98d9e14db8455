// scratch: observed NS convergence rates on the trig problem
use hdg2d::analysis::{manufactured_problem, ns_study_level};
use hdg2d::spaces::Family;

fn main() {
    let k: u32 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let maxn: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let ex = manufactured_problem("trig", 1.0).unwrap();
    let mut prev: Option<hdg2d::analysis::NsErrorRow> = None;
    let mut n = 2;
    while n <= maxn {
        let t0 = std::time::Instant::now();
        let out = ns_study_level(Family::Hdg, k, n, &ex, false, 1e-10, 30, 1.0).unwrap();
        let row = out.row;
        let dt = t0.elapsed().as_secs_f64();
        print!(
            "n={:3} dofs={:6} L={:.3e} u={:.3e} p={:.3e} eu={:.3e} eh1={:.3e} pf={:.3e} th={:.3e} st={:.3} it={} ({dt:.1}s)",
            row.n, row.dofs, row.err_l, row.err_u, row.err_p, row.e_u, row.e_h1, row.e_pf_scaled,
            row.theta_ns_sqrt, row.stability_ratio, row.picard_iterations
        );
        if let Some(p) = &prev {
            print!(
                "  | rates: L={:.2} u={:.2} p={:.2} eu={:.2} eh1={:.2} pf={:.2} th={:.2}",
                (p.err_l / row.err_l).log2(),
                (p.err_u / row.err_u).log2(),
                (p.err_p / row.err_p).log2(),
                (p.e_u / row.e_u).log2(),
                (p.e_h1 / row.e_h1).log2(),
                (p.e_pf_scaled / row.e_pf_scaled).log2(),
                (p.theta_ns_sqrt / row.theta_ns_sqrt).log2(),
            );
        }
        println!();
        prev = Some(row);
        n *= 2;
    }
}
