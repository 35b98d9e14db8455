//! Error type shared across the crate.

use crate::navierstokes::PicardTrace;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mesh topology error: {0}")]
    Topology(String),

    #[error("unsupported quadrature degree {requested} (maximum {max})")]
    UnsupportedDegree { requested: u32, max: u32 },

    #[error("space construction failed: {0}")]
    Construction(String),

    #[error("M-decomposition splitting failed: {0}")]
    Decomposition(String),

    #[error("ill-conditioned material tensor: {0}")]
    IllConditionedMaterial(String),

    #[error("local assembly failed: {0}")]
    Assembly(String),

    #[error("global solve failed: {0}")]
    Solver(String),

    #[error("certified inequality violated: {0}")]
    TheoremViolation(String),

    #[error("Picard iteration did not converge after {} iterations", .0.records.len())]
    NonConvergence(Box<PicardTrace>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}
