//! Configuration-driven entry point: verification suites, inequality
//! constants, and diffusion/Stokes/Navier-Stokes convergence studies.
//!
//! Logging goes to standard error; data is written to files only. The
//! worker count is capped by the `HDG_THREADS` environment variable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use hdg2d::analysis::{manufactured_problem, ns_study_level};
use hdg2d::diffusion::manufactured_diffusion_level;
use hdg2d::localops::{AlphaMode, Material};
use hdg2d::mdecomp;
use hdg2d::mesh::{ElementGeom, Mesh, Shape};
use hdg2d::navierstokes::structural_invariants;
use hdg2d::report::{
    diffusion_level_row, ns_level_row, LevelRow, StudyReport, DIFFUSION_COLUMNS, NS_COLUMNS,
};
use hdg2d::spaces::{Family, LocalSpaces, SpaceCache};

#[derive(Parser)]
#[command(name = "hdg2d", about = "2D HDG/mixed solver studies", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Certify M-decompositions and stabilization spaces for the space
    /// families.
    Verify(StudyArgs),
    /// Compute the discrete H1/Poincare-Friedrichs inequality constants.
    Constants(StudyArgs),
    /// Manufactured-solution diffusion convergence study.
    Diffusion(StudyArgs),
    /// Stokes convergence study (frozen zero convection).
    Stokes(StudyArgs),
    /// Navier-Stokes convergence study with Picard iteration.
    Ns(StudyArgs),
    /// Re-emit a JSON study report as csv/markdown/json.
    Report {
        input: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct StudyArgs {
    /// JSON config file; flags override individual fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    k: Option<u32>,
    /// Comma-separated refinement levels, e.g. `4,8,16,32`.
    #[arg(long)]
    levels: Option<String>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    alpha_mode: Option<String>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format: json | csv | markdown.
    #[arg(long)]
    format: Option<String>,
    /// Manufactured problem: trig | kovasznay.
    #[arg(long)]
    manufactured: Option<String>,
}

/// Resolved study configuration.
#[derive(Clone, Debug, serde::Serialize)]
struct StudyConfig {
    problem: String,
    family: Family,
    k: u32,
    levels: Vec<usize>,
    nu: f64,
    alpha_mode: AlphaMode,
    tol: f64,
    max_iter: usize,
    omega: f64,
    seed: u64,
    out: PathBuf,
    format: String,
    manufactured: String,
}

#[derive(serde::Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    problem: Option<String>,
    family: Option<String>,
    k: Option<u32>,
    shape: Option<String>,
    levels: Option<Vec<usize>>,
    nu: Option<f64>,
    alpha_mode: Option<String>,
    tol: Option<f64>,
    max_iter: Option<usize>,
    omega: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    format: Option<String>,
    manufactured: Option<String>,
}

fn resolve_config(problem: &str, args: &StudyArgs) -> anyhow::Result<StudyConfig> {
    let raw: RawConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => RawConfig::default(),
    };
    if let Some(p) = &raw.problem {
        let normalized = p.replace('_', "-");
        let matches = match problem {
            "verify" => normalized == "verify-spaces",
            "constants" => normalized == "inequality-constants",
            other => normalized == other,
        };
        if !matches {
            bail!("config field `problem` is `{p}` but the subcommand is `{problem}`");
        }
    }
    let family: Family = args
        .family
        .clone()
        .or(raw.family)
        .unwrap_or_else(|| "hdg".into())
        .parse()
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    if let Some(shape) = &raw.shape {
        let parsed: Shape = shape.parse().map_err(|e| anyhow::anyhow!("{e}"))?;
        if parsed != family.shape() {
            bail!("config field `shape` ({shape}) conflicts with family {family}");
        }
    }
    let k = args.k.or(raw.k).unwrap_or(1);
    let levels = match &args.levels {
        Some(text) => text
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .context("parsing --levels")?,
        None => raw.levels.unwrap_or_else(|| vec![4, 8, 16]),
    };
    if levels.is_empty() {
        bail!("config field `levels` must be nonempty");
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        bail!("config field `levels` must be strictly increasing");
    }
    let needs_nu = matches!(problem, "diffusion" | "stokes" | "ns");
    let nu = match args.nu.or(raw.nu) {
        Some(v) if v > 0.0 => v,
        Some(v) => bail!("config field `nu` must be positive, got {v}"),
        None if needs_nu => bail!("config is missing the required field `nu`"),
        None => 1.0,
    };
    let alpha_mode: AlphaMode = args
        .alpha_mode
        .clone()
        .or(raw.alpha_mode)
        .unwrap_or_else(|| "minimal".into())
        .parse()
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    let format = args
        .format
        .clone()
        .or(raw.format)
        .unwrap_or_else(|| "json".into());
    if !["json", "csv", "markdown"].contains(&format.as_str()) {
        bail!("config field `format` must be json, csv or markdown");
    }
    let out = args.out.clone().or(raw.out).unwrap_or_else(|| {
        PathBuf::from(format!("hdg2d_{problem}.{}", extension(&format)))
    });
    Ok(StudyConfig {
        problem: problem.into(),
        family,
        k,
        levels,
        nu,
        alpha_mode,
        tol: args.tol.or(raw.tol).unwrap_or(1e-10),
        max_iter: args.max_iter.or(raw.max_iter).unwrap_or(30),
        omega: args.omega.or(raw.omega).unwrap_or(1.0),
        seed: args.seed.or(raw.seed).unwrap_or(0),
        out,
        format,
        manufactured: args
            .manufactured
            .clone()
            .or(raw.manufactured)
            .unwrap_or_else(|| "trig".into()),
    })
}

fn extension(format: &str) -> &'static str {
    match format {
        "csv" => "csv",
        "markdown" => "md",
        _ => "json",
    }
}

fn write_report(report: &StudyReport, cfg: &StudyConfig) -> anyhow::Result<()> {
    let text = match cfg.format.as_str() {
        "csv" => report.to_csv(),
        "markdown" => report.to_markdown(),
        _ => report.to_json(),
    };
    write_text(&cfg.out, &text)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

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

fn family_list(restrict: Option<Family>) -> Vec<Family> {
    match restrict {
        Some(f) => vec![f],
        None => Family::ALL.to_vec(),
    }
}

fn run_verify(args: &StudyArgs) -> anyhow::Result<i32> {
    let cfg = resolve_config("verify", args)?;
    let restrict = args.family.as_ref().map(|_| cfg.family);
    let k_restrict = args.k;
    let mut reports = Vec::new();
    let mut all_pass = true;
    for family in family_list(restrict) {
        let (k_lo, k_hi) = match k_restrict {
            Some(k) => (k.max(family.min_degree()), k.max(family.min_degree())),
            None => (family.min_degree(), 3),
        };
        for k in k_lo..=k_hi {
            let geom = unit_element(family);
            let ls = LocalSpaces::build(family, k, &geom)
                .with_context(|| format!("building {family} k={k}"))?;
            let mut rep = mdecomp::verify_mdecomposition(&ls);
            let pp = mdecomp::verify_pp_space(&ls).map_err(|e| anyhow::anyhow!("{e}"))?;
            rep.checks.extend(pp.checks);
            all_pass &= rep.all_pass();
            eprintln!(
                "verify {family} k={k}: {} ({} checks, max residual {:.3e})",
                if rep.all_pass() { "pass" } else { "FAIL" },
                rep.checks.len(),
                rep.max_residual()
            );
            reports.push(rep);
        }
    }
    let text = serde_json::to_string_pretty(&reports)?;
    write_text(&cfg.out, &text)?;
    Ok(if all_pass { 0 } else { 1 })
}

fn run_constants(args: &StudyArgs) -> anyhow::Result<i32> {
    let cfg = resolve_config("constants", args)?;
    let restrict = args.family.as_ref().map(|_| cfg.family);
    #[derive(serde::Serialize)]
    struct ConstantsRow {
        family: String,
        k: u32,
        c_h1: f64,
        c_pf: f64,
        kernel_dim: usize,
        /// max over the element classes of structured meshes per level
        mesh_max_c_h1: BTreeMap<usize, f64>,
    }
    let mut rows = Vec::new();
    let k_restrict = args.k;
    for family in family_list(restrict) {
        let (k_lo, k_hi) = match k_restrict {
            Some(k) => (k.max(family.min_degree()), k.max(family.min_degree())),
            None => (family.min_degree(), 3),
        };
        for k in k_lo..=k_hi {
            let geom = unit_element(family);
            let ls = LocalSpaces::build(family, k, &geom)?;
            let c = mdecomp::inequality_constants(&ls, Material::identity())
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            let mut mesh_max = BTreeMap::new();
            for &n in &cfg.levels {
                let mesh = Mesh::unit_square(family.shape(), n)?;
                let mut cache = SpaceCache::new();
                let mut worst = 0.0_f64;
                let mut seen = std::collections::HashSet::new();
                for e in 0..mesh.n_elements() {
                    let g = mesh.element_geom(e);
                    if seen.insert(g.class_key()) {
                        let ls = cache.get(family, k, &g)?;
                        let ce = mdecomp::inequality_constants(&ls, Material::identity())
                            .map_err(|e| anyhow::anyhow!("{e}"))?;
                        worst = worst.max(ce.c_h1);
                    }
                }
                mesh_max.insert(n, worst);
            }
            eprintln!(
                "constants {family} k={k}: C_H1 = {:.6}, C_PF = {:.6}",
                c.c_h1, c.c_pf
            );
            rows.push(ConstantsRow {
                family: family.to_string(),
                k,
                c_h1: c.c_h1,
                c_pf: c.c_pf,
                kernel_dim: c.kernel_dim,
                mesh_max_c_h1: mesh_max,
            });
        }
    }
    let text = serde_json::to_string_pretty(&rows)?;
    write_text(&cfg.out, &text)?;
    Ok(0)
}

fn run_diffusion(args: &StudyArgs) -> anyhow::Result<i32> {
    let cfg = resolve_config("diffusion", args)?;
    let mut report = StudyReport::new(
        "diffusion",
        &cfg.family.to_string(),
        cfg.k,
        cfg.nu,
        &DIFFUSION_COLUMNS,
    );
    let mut ok = true;
    for &n in &cfg.levels {
        let (errs, diag) = manufactured_diffusion_level(cfg.family, cfg.k, n, cfg.alpha_mode)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        ok &= diag.conservation <= 1e-11;
        ok &= diag.h1_stability_ratio <= diag.c_h1_certified * (1.0 + 1e-9);
        let mut row: LevelRow = diffusion_level_row(&errs);
        row.extra
            .insert("h1_stability_ratio".into(), diag.h1_stability_ratio);
        row.extra.insert("c_h1_certified".into(), diag.c_h1_certified);
        eprintln!(
            "diffusion {} k={} n={n}: err_q = {:.3e}, err_u = {:.3e}",
            cfg.family, cfg.k, errs.err_q, errs.err_u
        );
        report.push_level(row);
    }
    write_report(&report, &cfg)?;
    Ok(if ok { 0 } else { 1 })
}

fn run_flow(problem: &str, args: &StudyArgs) -> anyhow::Result<i32> {
    let cfg = resolve_config(problem, args)?;
    let stokes_only = problem == "stokes";
    let exact = manufactured_problem(&cfg.manufactured, cfg.nu).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut report = StudyReport::new(
        problem,
        &cfg.family.to_string(),
        cfg.k,
        cfg.nu,
        &NS_COLUMNS,
    );
    let mut ok = true;
    let mut last_trace = None;
    for &n in &cfg.levels {
        let level_out = ns_study_level(
            cfg.family,
            cfg.k,
            n,
            &exact,
            stokes_only,
            cfg.tol,
            cfg.max_iter,
            cfg.omega,
        )
        .map_err(|e| anyhow::anyhow!("{e}"))?;
        let inv = structural_invariants(&level_out.mesh, &level_out.sol, &level_out.trace, cfg.seed);
        ok &= inv.all_pass();
        let row = &level_out.row;
        let mut level = ns_level_row(row);
        level.extra.insert("oh_identity_gap".into(), inv.oh_identity_gap);
        level
            .extra
            .insert("incompressibility".into(), inv.incompressibility);
        eprintln!(
            "{problem} {} k={} n={n}: err_L = {:.3e}, e_u = {:.3e}, iters = {}",
            cfg.family, cfg.k, row.err_l, row.e_u, row.picard_iterations
        );
        report.push_level(level);
        last_trace = Some(level_out.trace);
    }
    write_report(&report, &cfg)?;
    // companion iteration trace of the finest level
    if let Some(trace) = last_trace {
        let trace_path = cfg.out.with_extension("trace.json");
        write_text(&trace_path, &trace.to_json())?;
    }
    Ok(if ok { 0 } else { 1 })
}

fn run_report(input: &Path, format: &str, out: Option<&Path>) -> anyhow::Result<i32> {
    let text = std::fs::read_to_string(input)?;
    let report = StudyReport::from_json(&text).map_err(|e| anyhow::anyhow!("{e}"))?;
    let rendered = match format {
        "csv" => report.to_csv(),
        "markdown" => report.to_markdown(),
        "json" => report.to_json(),
        other => bail!("unknown format `{other}`"),
    };
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| input.with_extension(extension(format)));
    write_text(&out, &rendered)?;
    Ok(0)
}

fn main() {
    if let Ok(threads) = std::env::var("HDG_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Verify(args) => run_verify(args),
        Cmd::Constants(args) => run_constants(args),
        Cmd::Diffusion(args) => run_diffusion(args),
        Cmd::Stokes(args) => run_flow("stokes", args),
        Cmd::Ns(args) => run_flow("ns", args),
        Cmd::Report { input, format, out } => run_report(input, format, out.as_deref()),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(2);
        }
    }
}
