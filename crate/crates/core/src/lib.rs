//! 2D hybridizable discontinuous Galerkin (HDG) and mixed finite element
//! solver kit built on local spaces admitting M-decompositions.
//!
//! The crate provides:
//!
//! - structured triangle/square meshes with face topology ([`mesh`]),
//! - monomial-backed polynomial bases and quadrature ([`poly`], [`quad`], [`basis`]),
//! - the local space families RT/HDG/BDM (triangles) and TNT/HDGQ/BDMQ
//!   (squares) together with their trace and stabilization spaces ([`spaces`]),
//! - numerical certification of M-decompositions and the sharp constants of
//!   the discrete H1 and Poincare-Friedrichs inequalities ([`mdecomp`]),
//! - per-element HDG local solvers with static condensation ([`localops`]),
//! - a global diffusion solver ([`diffusion`]) and an incompressible
//!   Navier-Stokes solver with divergence-free convective post-processing and
//!   Picard iteration ([`navierstokes`]),
//! - norms, projections, manufactured problems and convergence reporting
//!   ([`analysis`], [`report`]).

pub mod analysis;
pub mod basis;
pub mod diffusion;
pub mod dense;
pub mod error;
pub mod localops;
pub mod mdecomp;
pub mod mesh;
pub mod navierstokes;
pub mod poly;
pub mod quad;
pub mod report;
pub mod spaces;
pub mod sparse;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Relative rank tolerance used by every rank-revealing factorization in the
/// space constructions. Surfaced here so studies can reference the exact
/// value used for certification.
pub const RANK_TOL: f64 = 1e-10;
