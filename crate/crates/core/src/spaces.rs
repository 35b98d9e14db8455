//! Local space families admitting M-decompositions.
//!
//! Families on triangles: RT (mixed), HDG, BDM. Families on squares: TNT,
//! HDGQ, BDMQ. Each `LocalSpaces` carries, for one element:
//!
//! - the flux space `V(K)` and scalar space `W(K)`,
//! - the facewise trace space `M(dK)` and stabilization subspace `M_S(dK)`,
//! - the splitting `V = Vt (+) Vt_perp`, `W = Wt (+) Wt_perp` with
//!   `Wt = div V` and `Vt = grad W (+) {v : div v = 0, v.n = 0}`,
//! - the post-processing space `V*(K)` with `V subset V*`, `div V* = W`,
//!   and its own splitting `Vt*`.
//!
//! All bases are L2(K)-orthonormal (L2(F)-orthonormal on faces) and stored
//! as coefficient rows over a monomial dictionary in element-local
//! coordinates: triangles use `(x - centroid)/h` (the triangle families are
//! invariant under translation and uniform scaling), quadrilaterals use the
//! element's own unit-square coordinates (the square families are tied to
//! them). Evaluation tables are cached per geometry class and shared by all
//! congruent elements.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::basis::{dict_derivative_matrix, weighted_eval};
use crate::dense;
use crate::error::Error;
use crate::mesh::{ElementGeom, Mesh, Shape};
use crate::poly::{MonomialDict, Poly2, VecPoly2};
use crate::quad;
use crate::{Result, RANK_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Family {
    /// Raviart-Thomas on triangles: `V = Pk^2 + x Pk~`, `W = Pk`.
    Rt,
    /// HDG on triangles: `V = Pk^2`, `W = Pk`.
    Hdg,
    /// BDM on triangles: `V = Pk^2`, `W = P(k-1)` (k >= 1).
    Bdm,
    /// TNT on squares: `V = Qk^2 + curl{x^(k+1)y, xy^(k+1)} + x x^k y^k`, `W = Qk`.
    Tnt,
    /// HDG on squares: `V = Qk^2 + curl bubbles`, `W = Qk`.
    HdgQ,
    /// BDM on squares: `V = Qk^2 + curl bubbles`, `W = Qk \ {x^k y^k}` (k >= 1).
    BdmQ,
}

impl Family {
    pub fn shape(self) -> Shape {
        match self {
            Family::Rt | Family::Hdg | Family::Bdm => Shape::Triangle,
            Family::Tnt | Family::HdgQ | Family::BdmQ => Shape::Square,
        }
    }

    pub fn min_degree(self) -> u32 {
        match self {
            Family::Bdm | Family::BdmQ => 1,
            _ => 0,
        }
    }

    pub const ALL: [Family; 6] = [
        Family::Rt,
        Family::Hdg,
        Family::Bdm,
        Family::Tnt,
        Family::HdgQ,
        Family::BdmQ,
    ];
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rt" => Ok(Family::Rt),
            "hdg" => Ok(Family::Hdg),
            "bdm" => Ok(Family::Bdm),
            "tnt" => Ok(Family::Tnt),
            "hdgq" => Ok(Family::HdgQ),
            "bdmq" => Ok(Family::BdmQ),
            other => Err(Error::Parse(format!("unknown family `{other}`"))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Family::Rt => "rt",
            Family::Hdg => "hdg",
            Family::Bdm => "bdm",
            Family::Tnt => "tnt",
            Family::HdgQ => "hdgq",
            Family::BdmQ => "bdmq",
        };
        write!(f, "{s}")
    }
}

/// Scalar functions: coefficient rows over the class dictionary.
#[derive(Clone, Debug)]
pub struct ScalarFunctions {
    pub coeffs: DMatrix<f64>,
}

impl ScalarFunctions {
    pub fn len(&self) -> usize {
        self.coeffs.nrows()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Vector functions stored per local-frame component.
#[derive(Clone, Debug)]
pub struct VectorFunctions {
    pub cx: DMatrix<f64>,
    pub cy: DMatrix<f64>,
}

impl VectorFunctions {
    pub fn len(&self) -> usize {
        self.cx.nrows()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Facewise polynomial space on the element boundary. Functions live on one
/// face each (coefficients over powers of the face parameter `t in [0,1]`)
/// and vanish on the other faces.
#[derive(Clone, Debug)]
pub struct TraceSpace {
    /// Per local face: rows = functions on that face, columns = powers of t.
    pub face_coeffs: Vec<DMatrix<f64>>,
    /// Offset of each face's block in the stacked coefficient vector.
    pub offsets: Vec<usize>,
    pub total: usize,
}

impl TraceSpace {
    pub fn from_blocks(face_coeffs: Vec<DMatrix<f64>>) -> Self {
        let mut offsets = Vec::with_capacity(face_coeffs.len());
        let mut total = 0;
        for b in &face_coeffs {
            offsets.push(total);
            total += b.nrows();
        }
        Self {
            face_coeffs,
            offsets,
            total,
        }
    }

    pub fn n_on_face(&self, lf: usize) -> usize {
        self.face_coeffs[lf].nrows()
    }

    /// Values of the face-block functions at parameters `ts`.
    pub fn eval_face(&self, lf: usize, ts: &[f64]) -> DMatrix<f64> {
        let b = &self.face_coeffs[lf];
        let mut out = DMatrix::zeros(b.nrows(), ts.len());
        for (j, &t) in ts.iter().enumerate() {
            for i in 0..b.nrows() {
                let mut acc = 0.0;
                let mut tp = 1.0;
                for c in 0..b.ncols() {
                    acc += b[(i, c)] * tp;
                    tp *= t;
                }
                out[(i, j)] = acc;
            }
        }
        out
    }
}

/// Geometry-class data shared by congruent elements: spaces, quadrature in
/// local coordinates, and all evaluation tables.
#[derive(Clone, Debug)]
pub struct SpaceClass {
    pub family: Family,
    pub k: u32,
    pub shape: Shape,
    pub dict: MonomialDict,
    pub scale: f64,
    pub quad_degree: u32,

    /// Volume rule: local points, physical weights.
    pub vol_loc: Vec<[f64; 2]>,
    pub vol_w: Vec<f64>,
    /// Face rule: Gauss nodes/weights on [0,1].
    pub face_t: Vec<f64>,
    pub face_tw: Vec<f64>,
    /// Per local face: local points of the mapped nodes, physical weights.
    pub face_loc: Vec<Vec<[f64; 2]>>,
    pub face_w: Vec<Vec<f64>>,
    pub face_len: Vec<f64>,
    /// Outward unit normals in the local frame.
    pub normals_loc: Vec<[f64; 2]>,

    pub v: VectorFunctions,
    pub w: ScalarFunctions,
    pub m: TraceSpace,
    pub ms: TraceSpace,
    pub vt: VectorFunctions,
    pub vtp: VectorFunctions,
    pub wt: ScalarFunctions,
    pub wtp: ScalarFunctions,
    pub vstar: VectorFunctions,
    pub vstar_t: VectorFunctions,
    pub fstar: usize,

    pub tab: Tables,
}

/// Evaluation tables at the class quadrature points. Vector components are
/// local-frame; divergences and gradients carry the physical 1/scale factor.
#[derive(Clone, Debug)]
pub struct Tables {
    pub w_vol: DMatrix<f64>,
    pub w_gx: DMatrix<f64>,
    pub w_gy: DMatrix<f64>,
    pub v_x: DMatrix<f64>,
    pub v_y: DMatrix<f64>,
    pub v_div: DMatrix<f64>,
    pub vstar_x: DMatrix<f64>,
    pub vstar_y: DMatrix<f64>,
    pub vstar_div: DMatrix<f64>,
    pub vstar_t_x: DMatrix<f64>,
    pub vstar_t_y: DMatrix<f64>,
    /// Per local face tables (columns = face quadrature nodes).
    pub w_face: Vec<DMatrix<f64>>,
    pub v_n_face: Vec<DMatrix<f64>>,
    pub v_x_face: Vec<DMatrix<f64>>,
    pub v_y_face: Vec<DMatrix<f64>>,
    pub vstar_n_face: Vec<DMatrix<f64>>,
    pub m_face: Vec<DMatrix<f64>>,
    pub ms_face: Vec<DMatrix<f64>>,
    pub vtp_n_face: Vec<DMatrix<f64>>,
    pub wtp_face: Vec<DMatrix<f64>>,
}

/// Local spaces bound to one element.
#[derive(Clone, Debug)]
pub struct LocalSpaces {
    pub geom: ElementGeom,
    pub class: Arc<SpaceClass>,
}

impl LocalSpaces {
    /// Builds the local space set for one standalone element.
    pub fn build(family: Family, k: u32, geom: &ElementGeom) -> Result<Self> {
        let class = Arc::new(SpaceClass::build(family, k, geom)?);
        Ok(Self {
            geom: geom.clone(),
            class,
        })
    }

    pub fn nv(&self) -> usize {
        self.class.v.len()
    }
    pub fn nw(&self) -> usize {
        self.class.w.len()
    }
    pub fn nm(&self) -> usize {
        self.class.m.total
    }
    pub fn n_faces(&self) -> usize {
        self.geom.n_faces()
    }
    pub fn h(&self) -> f64 {
        self.geom.h
    }

    /// Physical volume quadrature points for this element.
    pub fn vol_points_phys(&self) -> Vec<[f64; 2]> {
        self.class
            .vol_loc
            .iter()
            .map(|&l| self.geom.phys(l))
            .collect()
    }

    /// Physical quadrature points on local face `lf`.
    pub fn face_points_phys(&self, lf: usize) -> Vec<[f64; 2]> {
        let f = &self.geom.faces[lf];
        self.class.face_t.iter().map(|&t| f.point(t)).collect()
    }
}

const MAX_K: u32 = 4;

impl SpaceClass {
    pub fn build(family: Family, k: u32, geom: &ElementGeom) -> Result<Self> {
        if geom.shape != family.shape() {
            return Err(Error::InvalidArgument(format!(
                "family {family:?} needs {:?} elements, got {:?}",
                family.shape(),
                geom.shape
            )));
        }
        if k < family.min_degree() {
            return Err(Error::InvalidArgument(format!(
                "family {family:?} needs k >= {}",
                family.min_degree()
            )));
        }
        if k > MAX_K {
            return Err(Error::InvalidArgument(format!(
                "degree k = {k} above supported maximum {MAX_K}"
            )));
        }

        let (v_gens, w_gens) = generators(family, k);
        let (vstar_gens, _) = generators(pp_family(family), k);
        Self::build_from_generators(family, k, geom, v_gens, w_gens, vstar_gens, true)
    }

    /// Builds a space set from caller-supplied generators, using `family`
    /// only for the stabilization-space rules. With `enforce_dims = false`
    /// the dimension identity of the splitting is recorded but not fatal,
    /// so candidate spaces that fail to admit an M-decomposition can still
    /// be assembled and fed to the verifier.
    pub fn build_candidate(
        family: Family,
        k: u32,
        geom: &ElementGeom,
        v_gens: Vec<VecPoly2>,
        w_gens: Vec<Poly2>,
    ) -> Result<Self> {
        let vstar_gens = v_gens.clone();
        Self::build_from_generators(family, k, geom, v_gens, w_gens, vstar_gens, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn build_from_generators(
        family: Family,
        k: u32,
        geom: &ElementGeom,
        v_gens: Vec<VecPoly2>,
        w_gens: Vec<Poly2>,
        vstar_gens: Vec<VecPoly2>,
        enforce_dims: bool,
    ) -> Result<Self> {
        let deg_max = v_gens
            .iter()
            .map(|v| v.total_degree())
            .chain(w_gens.iter().map(|w| w.total_degree()))
            .chain(vstar_gens.iter().map(|v| v.total_degree()))
            .max()
            .unwrap_or(0);
        let quad_degree = 3 * deg_max + 4;
        let dict = MonomialDict::total_degree(2 * deg_max + 2);

        // Quadrature in local coordinates with physical weights.
        let vol_rule = quad::quadrature(geom.shape, quad_degree)?;
        let (vol_loc, vol_w) = map_volume_rule(geom, &vol_rule);
        let edge_rule = quad::edge_quadrature(quad_degree)?;
        let nf = geom.n_faces();
        let mut face_loc = Vec::with_capacity(nf);
        let mut face_w = Vec::with_capacity(nf);
        let mut face_len = Vec::with_capacity(nf);
        for lf in 0..nf {
            let f = &geom.faces[lf];
            let pts: Vec<[f64; 2]> = edge_rule
                .points
                .iter()
                .map(|&t| geom.local(f.point(t)))
                .collect();
            let wts: Vec<f64> = edge_rule.weights.iter().map(|&w| w * f.length).collect();
            face_loc.push(pts);
            face_w.push(wts);
            face_len.push(f.length);
        }
        let normals_loc: Vec<[f64; 2]> = geom
            .normals
            .iter()
            .map(|&n| geom.vec_to_local(n))
            .collect();

        // Orthonormal W and V.
        let w = orthonormal_scalar(&w_gens, &dict, &vol_loc, &vol_w, true)?;
        let v = orthonormal_vector(&v_gens, &dict, &vol_loc, &vol_w, true)?;
        let vstar = orthonormal_vector(&vstar_gens, &dict, &vol_loc, &vol_w, true)?;

        let dx = dict_derivative_matrix(&dict, true);
        let dy = dict_derivative_matrix(&dict, false);

        // Wt = div V, Wt_perp its complement in W.
        let div_coeffs = &v.cx * &dx + &v.cy * &dy;
        let wt = orthonormal_scalar_from_coeffs(&div_coeffs, &dict, &vol_loc, &vol_w)?;
        let wtp = scalar_complement(&w, &wt, &dict, &vol_loc, &vol_w)?;

        // Vt = grad W (+) {v in V : div v = 0, v.n = 0}; Vt_perp in V.
        let vt = tilde_vector_space(&v, &w, &dict, &vol_loc, &vol_w, &face_loc, &face_w, &normals_loc, &dx, &dy)?;
        let vtp = vector_complement(&v, &vt, &dict, &vol_loc, &vol_w)?;

        // Vt*: same construction on V*.
        let vstar_t = tilde_vector_space(
            &vstar, &w, &dict, &vol_loc, &vol_w, &face_loc, &face_w, &normals_loc, &dx, &dy,
        )?;

        // Trace space M(dK): orthonormal P_k per face.
        let m = trace_space_pk(k, &face_len);
        let fstar = match geom.shape {
            // face opposite local vertex 0
            Shape::Triangle => 1,
            // bottom face
            Shape::Square => 0,
        };
        let ms = stabilization_space(family, k, geom, fstar, &m, &face_len, w.len(), wt.len())?;

        if enforce_dims && v.len() - vt.len() + w.len() - wt.len() != m.total {
            return Err(Error::Decomposition(format!(
                "dim Vt_perp ({}) + dim Wt_perp ({}) != dim M ({})",
                v.len() - vt.len(),
                w.len() - wt.len(),
                m.total
            )));
        }

        let tab = Tables::build(
            &dict, geom, &vol_loc, &vol_w, &face_loc, &edge_rule.points, &v, &w, &vstar, &vstar_t,
            &vtp, &wtp, &m, &ms, &normals_loc, &dx, &dy,
        );

        Ok(Self {
            family,
            k,
            shape: geom.shape,
            dict,
            scale: geom.scale,
            quad_degree,
            vol_loc,
            vol_w,
            face_t: edge_rule.points.clone(),
            face_tw: edge_rule.weights.clone(),
            face_loc,
            face_w,
            face_len,
            normals_loc,
            v,
            w,
            m,
            ms,
            vt,
            vtp,
            wt,
            wtp,
            vstar,
            vstar_t,
            fstar,
            tab,
        })
    }
}

/// The family whose V serves as the post-processing space V* (smallest
/// enrichment with `div V* = W`).
fn pp_family(family: Family) -> Family {
    match family {
        Family::Hdg => Family::Rt,
        Family::HdgQ => Family::Tnt,
        other => other,
    }
}

/// Table-1 generators of `V(K) x W(K)` in local coordinates.
fn generators(family: Family, k: u32) -> (Vec<VecPoly2>, Vec<Poly2>) {
    let pk = |deg: u32| -> Vec<Poly2> {
        let mut out = Vec::new();
        for d in 0..=deg {
            for ax in (0..=d).rev() {
                out.push(Poly2::monomial(ax, d - ax, 1.0));
            }
        }
        out
    };
    let qk = |deg: u32| -> Vec<Poly2> {
        let mut out = Vec::new();
        for ax in 0..=deg {
            for ay in 0..=deg {
                out.push(Poly2::monomial(ax, ay, 1.0));
            }
        }
        out
    };
    let vec_of = |polys: &[Poly2]| -> Vec<VecPoly2> {
        let mut out = Vec::new();
        for p in polys {
            out.push(VecPoly2::new(p.clone(), Poly2::zero()));
            out.push(VecPoly2::new(Poly2::zero(), p.clone()));
        }
        out
    };
    let curl_bubbles = |k: u32| -> Vec<VecPoly2> {
        // span{x^(k+1) y, x y^(k+1)} collapses to one function for k = 0
        if k == 0 {
            vec![Poly2::monomial(1, 1, 1.0).curl()]
        } else {
            vec![
                Poly2::monomial(k + 1, 1, 1.0).curl(),
                Poly2::monomial(1, k + 1, 1.0).curl(),
            ]
        }
    };
    match family {
        Family::Rt => {
            let mut v = vec_of(&pk(k));
            for ax in 0..=k {
                // x * (x^ax y^(k-ax))
                let p = Poly2::monomial(ax, k - ax, 1.0);
                v.push(VecPoly2::new(p.mul_monomial(1, 0, 1.0), p.mul_monomial(0, 1, 1.0)));
            }
            (v, pk(k))
        }
        Family::Hdg => (vec_of(&pk(k)), pk(k)),
        Family::Bdm => (vec_of(&pk(k)), pk(k - 1)),
        Family::Tnt => {
            let mut v = vec_of(&qk(k));
            v.extend(curl_bubbles(k));
            let p = Poly2::monomial(k, k, 1.0);
            v.push(VecPoly2::new(p.mul_monomial(1, 0, 1.0), p.mul_monomial(0, 1, 1.0)));
            (v, qk(k))
        }
        Family::HdgQ => {
            let mut v = vec_of(&qk(k));
            v.extend(curl_bubbles(k));
            (v, qk(k))
        }
        Family::BdmQ => {
            let mut v = vec_of(&qk(k));
            v.extend(curl_bubbles(k));
            let w = qk(k)
                .into_iter()
                .filter(|p| {
                    let t = p.terms()[0];
                    !(t.ax == k && t.ay == k)
                })
                .collect();
            (v, w)
        }
    }
}

/// Maps a reference volume rule to (local points, physical weights) for an
/// element; exposed for error quadrature at elevated degrees.
pub fn map_volume_rule_public(
    geom: &ElementGeom,
    rule: &quad::QuadRule,
) -> (Vec<[f64; 2]>, Vec<f64>) {
    map_volume_rule(geom, rule)
}

fn map_volume_rule(geom: &ElementGeom, rule: &quad::QuadRule) -> (Vec<[f64; 2]>, Vec<f64>) {
    match geom.shape {
        Shape::Triangle => {
            let [v0, v1, v2] = [geom.vertices[0], geom.vertices[1], geom.vertices[2]];
            let jac = 2.0 * geom.area;
            let pts = rule
                .points
                .iter()
                .map(|&[r, s]| {
                    let phys = [
                        v0[0] + r * (v1[0] - v0[0]) + s * (v2[0] - v0[0]),
                        v0[1] + r * (v1[1] - v0[1]) + s * (v2[1] - v0[1]),
                    ];
                    geom.local(phys)
                })
                .collect();
            let wts = rule.weights.iter().map(|&w| w * jac).collect();
            (pts, wts)
        }
        Shape::Square => {
            // local coordinates are the unit-square coordinates
            let jac = geom.scale * geom.scale;
            (
                rule.points.clone(),
                rule.weights.iter().map(|&w| w * jac).collect(),
            )
        }
    }
}

pub(crate) fn orthonormal_scalar(
    gens: &[Poly2],
    dict: &MonomialDict,
    pts: &[[f64; 2]],
    wts: &[f64],
    require_full_rank: bool,
) -> Result<ScalarFunctions> {
    let mut coeffs = DMatrix::zeros(gens.len(), dict.len());
    for (i, g) in gens.iter().enumerate() {
        let c = dict.coeffs_of(g).ok_or_else(|| {
            Error::Construction("generator outside the monomial dictionary".into())
        })?;
        for (j, v) in c.iter().enumerate() {
            coeffs[(i, j)] = *v;
        }
    }
    let vals = &coeffs * dict.eval_table(pts);
    let e = weighted_eval(&vals, wts);
    let (w, _rank, _) = dense::orthonormalize_rows(&e, RANK_TOL);
    let out = ScalarFunctions { coeffs: &w * &coeffs };
    if require_full_rank && out.len() != gens.len() {
        return Err(Error::Construction(format!(
            "scalar generators rank-deficient: {} of {}",
            out.len(),
            gens.len()
        )));
    }
    Ok(out)
}

pub(crate) fn orthonormal_scalar_from_coeffs(
    coeffs: &DMatrix<f64>,
    dict: &MonomialDict,
    pts: &[[f64; 2]],
    wts: &[f64],
) -> Result<ScalarFunctions> {
    // derived spans may be exactly zero; floor the cutoff at unit scale
    let vals = coeffs * dict.eval_table(pts);
    let e = weighted_eval(&vals, wts);
    let (w, _rank, _) = dense::orthonormalize_rows_anchored(&e, RANK_TOL, Some(1.0));
    Ok(ScalarFunctions { coeffs: &w * coeffs })
}

pub(crate) fn orthonormal_vector(
    gens: &[VecPoly2],
    dict: &MonomialDict,
    pts: &[[f64; 2]],
    wts: &[f64],
    require_full_rank: bool,
) -> Result<VectorFunctions> {
    let mut cx = DMatrix::zeros(gens.len(), dict.len());
    let mut cy = DMatrix::zeros(gens.len(), dict.len());
    for (i, g) in gens.iter().enumerate() {
        let ax = dict.coeffs_of(&g.x).ok_or_else(|| {
            Error::Construction("generator outside the monomial dictionary".into())
        })?;
        let ay = dict.coeffs_of(&g.y).ok_or_else(|| {
            Error::Construction("generator outside the monomial dictionary".into())
        })?;
        for (j, v) in ax.iter().enumerate() {
            cx[(i, j)] = *v;
        }
        for (j, v) in ay.iter().enumerate() {
            cy[(i, j)] = *v;
        }
    }
    let e = stacked_weighted_eval(&cx, &cy, dict, pts, wts);
    let (w, _rank, _) = dense::orthonormalize_rows(&e, RANK_TOL);
    let out = VectorFunctions { cx: &w * &cx, cy: &w * &cy };
    if require_full_rank && out.len() != gens.len() {
        return Err(Error::Construction(format!(
            "vector generators rank-deficient: {} of {}",
            out.len(),
            gens.len()
        )));
    }
    Ok(out)
}

pub(crate) fn stacked_weighted_eval(
    cx: &DMatrix<f64>,
    cy: &DMatrix<f64>,
    dict: &MonomialDict,
    pts: &[[f64; 2]],
    wts: &[f64],
) -> DMatrix<f64> {
    let t = dict.eval_table(pts);
    let ex = weighted_eval(&(cx * &t), wts);
    let ey = weighted_eval(&(cy * &t), wts);
    let mut e = DMatrix::zeros(cx.nrows(), 2 * pts.len());
    e.view_mut((0, 0), (cx.nrows(), pts.len())).copy_from(&ex);
    e.view_mut((0, pts.len()), (cx.nrows(), pts.len()))
        .copy_from(&ey);
    e
}

pub(crate) fn orthonormal_vector_from_coeffs(
    cx: &DMatrix<f64>,
    cy: &DMatrix<f64>,
    dict: &MonomialDict,
    pts: &[[f64; 2]],
    wts: &[f64],
) -> Result<VectorFunctions> {
    // derived spans may be exactly zero; floor the cutoff at unit scale
    let e = stacked_weighted_eval(cx, cy, dict, pts, wts);
    let (w, _rank, _) = dense::orthonormalize_rows_anchored(&e, RANK_TOL, Some(1.0));
    Ok(VectorFunctions {
        cx: &w * cx,
        cy: &w * cy,
    })
}

pub(crate) fn scalar_complement(
    space: &ScalarFunctions,
    sub: &ScalarFunctions,
    dict: &MonomialDict,
    pts: &[[f64; 2]],
    wts: &[f64],
) -> Result<ScalarFunctions> {
    let t = dict.eval_table(pts);
    let e_space = weighted_eval(&(&space.coeffs * &t), wts);
    let e_sub = weighted_eval(&(&sub.coeffs * &t), wts);
    let proj = &e_space * e_sub.transpose();
    let res_coeffs = &space.coeffs - &proj * &sub.coeffs;
    let res_vals = &e_space - &proj * &e_sub;
    let (w, rank, _) = dense::orthonormalize_rows_anchored(&res_vals, RANK_TOL, Some(1.0));
    if rank != space.len() - sub.len() {
        return Err(Error::Decomposition(format!(
            "scalar complement rank {} != {} - {}",
            rank,
            space.len(),
            sub.len()
        )));
    }
    Ok(ScalarFunctions {
        coeffs: &w * res_coeffs,
    })
}

pub(crate) fn vector_complement(
    space: &VectorFunctions,
    sub: &VectorFunctions,
    dict: &MonomialDict,
    pts: &[[f64; 2]],
    wts: &[f64],
) -> Result<VectorFunctions> {
    let e_space = stacked_weighted_eval(&space.cx, &space.cy, dict, pts, wts);
    let e_sub = stacked_weighted_eval(&sub.cx, &sub.cy, dict, pts, wts);
    let proj = &e_space * e_sub.transpose();
    let res_x = &space.cx - &proj * &sub.cx;
    let res_y = &space.cy - &proj * &sub.cy;
    let res_vals = &e_space - &proj * &e_sub;
    let (w, rank, _) = dense::orthonormalize_rows_anchored(&res_vals, RANK_TOL, Some(1.0));
    if rank != space.len() - sub.len() {
        return Err(Error::Decomposition(format!(
            "vector complement rank {} != {} - {}",
            rank,
            space.len(),
            sub.len()
        )));
    }
    Ok(VectorFunctions {
        cx: &w * res_x,
        cy: &w * res_y,
    })
}

/// `Vt = grad W (+) {v in V : div v = 0, v.n|dK = 0}`, orthonormalized.
#[allow(clippy::too_many_arguments)]
fn tilde_vector_space(
    v: &VectorFunctions,
    w: &ScalarFunctions,
    dict: &MonomialDict,
    vol_loc: &[[f64; 2]],
    vol_w: &[f64],
    face_loc: &[Vec<[f64; 2]>],
    face_w: &[Vec<f64>],
    normals_loc: &[[f64; 2]],
    dx: &DMatrix<f64>,
    dy: &DMatrix<f64>,
) -> Result<VectorFunctions> {
    // bubble part: nullspace of the stacked (div, normal trace) constraints
    let t = dict.eval_table(vol_loc);
    let div_vals = weighted_eval(&((&v.cx * dx + &v.cy * dy) * &t), vol_w);
    let mut cols = div_vals.ncols();
    let mut face_tabs = Vec::new();
    for lf in 0..face_loc.len() {
        let tf = dict.eval_table(&face_loc[lf]);
        let n = normals_loc[lf];
        let vn = weighted_eval(&(&v.cx * &tf * n[0] + &v.cy * &tf * n[1]), &face_w[lf]);
        cols += vn.ncols();
        face_tabs.push(vn);
    }
    let mut constraints = DMatrix::zeros(v.len(), cols);
    constraints
        .view_mut((0, 0), (v.len(), div_vals.ncols()))
        .copy_from(&div_vals);
    let mut off = div_vals.ncols();
    for vn in &face_tabs {
        constraints
            .view_mut((0, off), (v.len(), vn.ncols()))
            .copy_from(vn);
        off += vn.ncols();
    }
    let alpha = dense::nullspace_cols(&constraints.transpose(), RANK_TOL);
    let bubbles_x = alpha.transpose() * &v.cx;
    let bubbles_y = alpha.transpose() * &v.cy;

    // gradient part
    let grad_x = &w.coeffs * dx;
    let grad_y = &w.coeffs * dy;

    let cx = stack_rows(&grad_x, &bubbles_x);
    let cy = stack_rows(&grad_y, &bubbles_y);
    orthonormal_vector_from_coeffs(&cx, &cy, dict, vol_loc, vol_w)
}

pub(crate) fn stack_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols().max(b.ncols()));
    out.view_mut((0, 0), (a.nrows(), a.ncols())).copy_from(a);
    out.view_mut((a.nrows(), 0), (b.nrows(), b.ncols()))
        .copy_from(b);
    out
}

/// Shifted Legendre coefficients over powers of t on [0,1], orthonormal for
/// the measure dt.
fn shifted_legendre(k: u32) -> DMatrix<f64> {
    // P_0 = 1, P_1 = 2t - 1, (n+1) P_{n+1} = (2n+1)(2t-1) P_n - n P_{n-1}
    let n = (k + 1) as usize;
    let mut rows: Vec<Vec<f64>> = vec![vec![1.0]];
    if n > 1 {
        rows.push(vec![-1.0, 2.0]);
    }
    for m in 1..(n.saturating_sub(1)) {
        let pm = &rows[m];
        let pm1 = &rows[m - 1];
        let mut next = vec![0.0; m + 2];
        // (2m+1)(2t-1) P_m
        for (j, &c) in pm.iter().enumerate() {
            next[j + 1] += (2 * m + 1) as f64 * 2.0 * c;
            next[j] -= (2 * m + 1) as f64 * c;
        }
        for (j, &c) in pm1.iter().enumerate() {
            next[j] -= m as f64 * c;
        }
        for c in next.iter_mut() {
            *c /= (m + 1) as f64;
        }
        rows.push(next);
    }
    let mut out = DMatrix::zeros(n, n);
    for (i, r) in rows.iter().enumerate() {
        let norm = (2 * i + 1) as f64;
        for (j, &c) in r.iter().enumerate() {
            out[(i, j)] = c * norm.sqrt();
        }
    }
    out
}

/// Facewise P_k trace space, orthonormal in L2 of each face.
fn trace_space_pk(k: u32, face_len: &[f64]) -> TraceSpace {
    let leg = shifted_legendre(k);
    let blocks = face_len
        .iter()
        .map(|&len| &leg / len.sqrt())
        .collect::<Vec<_>>();
    TraceSpace::from_blocks(blocks)
}

/// Builds `M_S` per the stabilization-space cases: empty when `div V = W`;
/// full P_k on the designated face for the triangle HDG family; the span of
/// the homogeneous tensor-degree monomial on one face for the square HDG
/// family.
fn stabilization_space(
    family: Family,
    k: u32,
    geom: &ElementGeom,
    fstar: usize,
    m: &TraceSpace,
    face_len: &[f64],
    dim_w: usize,
    dim_divv: usize,
) -> Result<TraceSpace> {
    let need = dim_w - dim_divv;
    let nf = face_len.len();
    let empty = |n_cols: usize| -> Vec<DMatrix<f64>> {
        (0..nf).map(|_| DMatrix::zeros(0, n_cols)).collect()
    };
    if need == 0 {
        return Ok(TraceSpace::from_blocks(empty(1)));
    }
    match family {
        Family::Hdg => {
            // case 2: full P_k on F*
            let mut blocks = empty((k + 1) as usize);
            blocks[fstar] = m.face_coeffs[fstar].clone();
            let ts = TraceSpace::from_blocks(blocks);
            if ts.total != need {
                return Err(Error::Construction(format!(
                    "M_S dimension {} != dim W - dim div V = {need}",
                    ts.total
                )));
            }
            Ok(ts)
        }
        Family::HdgQ => {
            // case 3: span{xi^k} on F*, xi = in-face unit-square coordinate
            let f = &geom.faces[fstar];
            let la = geom.local(f.a);
            let lb = geom.local(f.b);
            // xi(t): whichever local coordinate varies along the face
            let (c0, c1) = if (lb[0] - la[0]).abs() > (lb[1] - la[1]).abs() {
                (la[0], lb[0] - la[0])
            } else {
                (la[1], lb[1] - la[1])
            };
            // (c0 + c1 t)^k
            let mut poly = vec![1.0];
            for _ in 0..k {
                let mut next = vec![0.0; poly.len() + 1];
                for (j, &c) in poly.iter().enumerate() {
                    next[j] += c0 * c;
                    next[j + 1] += c1 * c;
                }
                poly = next;
            }
            // normalize in L2(F)
            let rule = quad::edge_quadrature(2 * k + 2)?;
            let mut norm2 = 0.0;
            for (&t, &w) in rule.points.iter().zip(&rule.weights) {
                let mut val = 0.0;
                let mut tp = 1.0;
                for &c in &poly {
                    val += c * tp;
                    tp *= t;
                }
                norm2 += w * val * val * face_len[fstar];
            }
            let norm = norm2.sqrt();
            let mut blocks = empty(poly.len());
            let mut row = DMatrix::zeros(1, poly.len());
            for (j, &c) in poly.iter().enumerate() {
                row[(0, j)] = c / norm;
            }
            blocks[fstar] = row;
            let ts = TraceSpace::from_blocks(blocks);
            if ts.total != need {
                return Err(Error::Construction(format!(
                    "M_S dimension {} != dim W - dim div V = {need}",
                    ts.total
                )));
            }
            Ok(ts)
        }
        _ => Err(Error::Construction(format!(
            "family {family:?} has dim W - dim div V = {need} but no stabilization-space case applies"
        ))),
    }
}

impl Tables {
    #[allow(clippy::too_many_arguments)]
    fn build(
        dict: &MonomialDict,
        geom: &ElementGeom,
        vol_loc: &[[f64; 2]],
        _vol_w: &[f64],
        face_loc: &[Vec<[f64; 2]>],
        face_t: &[f64],
        v: &VectorFunctions,
        w: &ScalarFunctions,
        vstar: &VectorFunctions,
        vstar_t: &VectorFunctions,
        vtp: &VectorFunctions,
        wtp: &ScalarFunctions,
        m: &TraceSpace,
        ms: &TraceSpace,
        normals_loc: &[[f64; 2]],
        dx: &DMatrix<f64>,
        dy: &DMatrix<f64>,
    ) -> Self {
        let t = dict.eval_table(vol_loc);
        let inv_s = 1.0 / geom.scale;
        let w_vol = &w.coeffs * &t;
        let w_gx = (&w.coeffs * dx) * &t * inv_s;
        let w_gy = (&w.coeffs * dy) * &t * inv_s;
        let v_x = &v.cx * &t;
        let v_y = &v.cy * &t;
        let v_div = (&v.cx * dx + &v.cy * dy) * &t * inv_s;
        let vstar_x = &vstar.cx * &t;
        let vstar_y = &vstar.cy * &t;
        let vstar_div = (&vstar.cx * dx + &vstar.cy * dy) * &t * inv_s;
        let vstar_t_x = &vstar_t.cx * &t;
        let vstar_t_y = &vstar_t.cy * &t;

        let nf = face_loc.len();
        let mut w_face = Vec::with_capacity(nf);
        let mut v_n_face = Vec::with_capacity(nf);
        let mut v_x_face = Vec::with_capacity(nf);
        let mut v_y_face = Vec::with_capacity(nf);
        let mut vstar_n_face = Vec::with_capacity(nf);
        let mut m_face = Vec::with_capacity(nf);
        let mut ms_face = Vec::with_capacity(nf);
        let mut vtp_n_face = Vec::with_capacity(nf);
        let mut wtp_face = Vec::with_capacity(nf);
        for lf in 0..nf {
            let tf = dict.eval_table(&face_loc[lf]);
            let n = normals_loc[lf];
            w_face.push(&w.coeffs * &tf);
            let vx = &v.cx * &tf;
            let vy = &v.cy * &tf;
            v_n_face.push(&vx * n[0] + &vy * n[1]);
            v_x_face.push(vx);
            v_y_face.push(vy);
            vstar_n_face.push(&vstar.cx * &tf * n[0] + &vstar.cy * &tf * n[1]);
            m_face.push(m.eval_face(lf, face_t));
            ms_face.push(ms.eval_face(lf, face_t));
            vtp_n_face.push(&vtp.cx * &tf * n[0] + &vtp.cy * &tf * n[1]);
            wtp_face.push(&wtp.coeffs * &tf);
        }
        Self {
            w_vol,
            w_gx,
            w_gy,
            v_x,
            v_y,
            v_div,
            vstar_x,
            vstar_y,
            vstar_div,
            vstar_t_x,
            vstar_t_y,
            w_face,
            v_n_face,
            v_x_face,
            v_y_face,
            vstar_n_face,
            m_face,
            ms_face,
            vtp_n_face,
            wtp_face,
        }
    }
}

/// Cache of `SpaceClass` objects keyed by (family, k, geometry class).
#[derive(Default)]
pub struct SpaceCache {
    map: HashMap<(Family, u32, Vec<i64>), Arc<SpaceClass>>,
}

impl SpaceCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, family: Family, k: u32, geom: &ElementGeom) -> Result<LocalSpaces> {
        let key = (family, k, geom.class_key());
        if let Some(class) = self.map.get(&key) {
            return Ok(LocalSpaces {
                geom: geom.clone(),
                class: Arc::clone(class),
            });
        }
        let class = Arc::new(SpaceClass::build(family, k, geom)?);
        self.map.insert(key, Arc::clone(&class));
        Ok(LocalSpaces {
            geom: geom.clone(),
            class,
        })
    }

    /// Local spaces for every element of a mesh (classes deduplicated).
    pub fn for_mesh(&mut self, mesh: &Mesh, family: Family, k: u32) -> Result<Vec<LocalSpaces>> {
        (0..mesh.n_elements())
            .map(|e| self.get(family, k, &mesh.element_geom(e)))
            .collect()
    }
}

/// Navier-Stokes local space bundle: the scalar diffusion set provides, per
/// velocity component, the row space of the velocity gradient (`V`), the
/// velocity component space (`W`), the trace component (`M`) and the
/// stabilization component (`M_S`); the pressure space equals `W`; the
/// convective velocity lives in `V*`.
#[derive(Clone, Debug)]
pub struct NsLocalSpaces {
    pub scalar: LocalSpaces,
}

impl NsLocalSpaces {
    pub fn build(scalar: LocalSpaces) -> Result<Self> {
        // closure requirement: d_i W subset W for all i
        let class = &scalar.class;
        let dict = &class.dict;
        let dx = dict_derivative_matrix(dict, true);
        let dy = dict_derivative_matrix(dict, false);
        let w = &class.w.coeffs;
        let stacked = stack_rows(&stack_rows(w, &(w * dx)), &(w * dy));
        let t = dict.eval_table(&class.vol_loc);
        let e = weighted_eval(&(&stacked * &t), &class.vol_w);
        if dense::svd_rank(&e, RANK_TOL) != class.w.len() {
            return Err(Error::Construction(
                "velocity component space is not closed under partial derivatives".into(),
            ));
        }
        Ok(Self { scalar })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_triangle() -> ElementGeom {
        ElementGeom::standalone(
            Shape::Triangle,
            vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        )
    }

    fn unit_square() -> ElementGeom {
        ElementGeom::standalone(
            Shape::Square,
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
        )
    }

    #[test]
    fn rt0_dimensions() {
        let ls = LocalSpaces::build(Family::Rt, 0, &unit_triangle()).unwrap();
        assert_eq!(ls.nv(), 3);
        assert_eq!(ls.nw(), 1);
        assert_eq!(ls.nm(), 3);
        assert_eq!(ls.class.ms.total, 0);
    }

    #[test]
    fn hdg1_dimensions() {
        let ls = LocalSpaces::build(Family::Hdg, 1, &unit_triangle()).unwrap();
        assert_eq!(ls.nv(), 6);
        assert_eq!(ls.nw(), 3);
        assert_eq!(ls.nm(), 6);
        // dim M_S = dim P_1 - dim P_0 = 2
        assert_eq!(ls.class.ms.total, 2);
    }

    #[test]
    fn tnt1_dimensions_no_accidental_dependence() {
        let ls = LocalSpaces::build(Family::Tnt, 1, &unit_square()).unwrap();
        // rank of the assembled generator matrix: 2*(k+1)^2 + 2 + 1 = 11
        assert_eq!(ls.nv(), 11);
        assert_eq!(ls.nw(), 4);
        assert_eq!(ls.class.ms.total, 0);
    }

    #[test]
    fn bdm_families_have_empty_ms() {
        let ls = LocalSpaces::build(Family::Bdm, 2, &unit_triangle()).unwrap();
        assert_eq!(ls.class.ms.total, 0);
        let ls = LocalSpaces::build(Family::BdmQ, 2, &unit_square()).unwrap();
        assert_eq!(ls.class.ms.total, 0);
    }

    #[test]
    fn hdgq_ms_is_one_dimensional() {
        for k in 0..=3 {
            let ls = LocalSpaces::build(Family::HdgQ, k, &unit_square()).unwrap();
            assert_eq!(ls.class.ms.total, 1, "k = {k}");
            assert_eq!(ls.class.ms.n_on_face(ls.class.fstar), 1);
        }
    }

    #[test]
    fn hdg2_ms_dimension() {
        let ls = LocalSpaces::build(Family::Hdg, 2, &unit_triangle()).unwrap();
        assert_eq!(ls.class.ms.total, 3); // dim P_2 - dim P_1 = 6 - 3
    }

    #[test]
    fn bdm_k0_rejected() {
        assert!(LocalSpaces::build(Family::Bdm, 0, &unit_triangle()).is_err());
        assert!(LocalSpaces::build(Family::BdmQ, 0, &unit_square()).is_err());
    }

    #[test]
    fn family_shape_mismatch_rejected() {
        assert!(LocalSpaces::build(Family::Rt, 0, &unit_square()).is_err());
        assert!(LocalSpaces::build(Family::Tnt, 0, &unit_triangle()).is_err());
    }

    #[test]
    fn rt0_tilde_split() {
        let ls = LocalSpaces::build(Family::Rt, 0, &unit_triangle()).unwrap();
        let c = &ls.class;
        // Wt = W = P_0, Wt_perp = 0, dim Vt_perp = 3 = dim M
        assert_eq!(c.wt.len(), 1);
        assert_eq!(c.wtp.len(), 0);
        assert_eq!(c.vtp.len(), 3);
    }

    #[test]
    fn hdg1_tilde_split() {
        let ls = LocalSpaces::build(Family::Hdg, 1, &unit_triangle()).unwrap();
        let c = &ls.class;
        assert_eq!(c.wtp.len(), 2);
        assert_eq!(c.vtp.len(), 4);
        assert_eq!(c.vtp.len() + c.wtp.len(), c.m.total);
    }

    #[test]
    fn grad_w_orthogonal_to_vtp() {
        // grad W lies in Vt, so it must be L2-orthogonal to Vt_perp
        for (family, k, geom) in [
            (Family::Rt, 1, unit_triangle()),
            (Family::Hdg, 2, unit_triangle()),
            (Family::Tnt, 1, unit_square()),
        ] {
            let ls = LocalSpaces::build(family, k, &geom).unwrap();
            let c = &ls.class;
            let dx = dict_derivative_matrix(&c.dict, true);
            let dy = dict_derivative_matrix(&c.dict, false);
            let t = c.dict.eval_table(&c.vol_loc);
            let gx = weighted_eval(&((&c.w.coeffs * &dx) * &t), &c.vol_w);
            let gy = weighted_eval(&((&c.w.coeffs * &dy) * &t), &c.vol_w);
            let px = weighted_eval(&(&c.vtp.cx * &t), &c.vol_w);
            let py = weighted_eval(&(&c.vtp.cy * &t), &c.vol_w);
            let ip = &gx * px.transpose() + &gy * py.transpose();
            assert!(ip.amax() <= 1e-12, "{family:?} k={k}: {}", ip.amax());
        }
    }

    #[test]
    fn vstar_divergence_spans_w() {
        // div V* = W by rank for families needing enrichment
        for (family, k, geom) in [
            (Family::Hdg, 1, unit_triangle()),
            (Family::HdgQ, 1, unit_square()),
            (Family::Tnt, 2, unit_square()),
            (Family::Rt, 2, unit_triangle()),
        ] {
            let ls = LocalSpaces::build(family, k, &geom).unwrap();
            let c = &ls.class;
            let dx = dict_derivative_matrix(&c.dict, true);
            let dy = dict_derivative_matrix(&c.dict, false);
            let div = &c.vstar.cx * &dx + &c.vstar.cy * &dy;
            let t = c.dict.eval_table(&c.vol_loc);
            let e_div = weighted_eval(&(&div * &t), &c.vol_w);
            let rank_div = dense::svd_rank(&e_div, RANK_TOL);
            assert_eq!(rank_div, c.w.len(), "{family:?} k={k}");
            // containment V subset V*: stacking leaves rank at dim V*
            let stacked_x = stack_rows(&c.vstar.cx, &c.v.cx);
            let stacked_y = stack_rows(&c.vstar.cy, &c.v.cy);
            let e = stacked_weighted_eval(&stacked_x, &stacked_y, &c.dict, &c.vol_loc, &c.vol_w);
            assert_eq!(dense::svd_rank(&e, RANK_TOL), c.vstar.len());
        }
    }

    #[test]
    fn trace_basis_orthonormal_on_faces() {
        let ls = LocalSpaces::build(Family::Hdg, 2, &unit_triangle()).unwrap();
        let c = &ls.class;
        for lf in 0..3 {
            let vals = &c.tab.m_face[lf];
            let mut gram: DMatrix<f64> = DMatrix::zeros(vals.nrows(), vals.nrows());
            for g in 0..vals.ncols() {
                for i in 0..vals.nrows() {
                    for j in 0..vals.nrows() {
                        gram[(i, j)] += c.face_w[lf][g] * vals[(i, g)] * vals[(j, g)];
                    }
                }
            }
            assert!((gram - DMatrix::identity(vals.nrows(), vals.nrows())).norm() < 1e-12);
        }
    }

    #[test]
    fn ns_spaces_satisfy_derivative_closure() {
        for (family, k, geom) in [
            (Family::Rt, 1, unit_triangle()),
            (Family::Hdg, 1, unit_triangle()),
            (Family::Bdm, 1, unit_triangle()),
            (Family::Tnt, 1, unit_square()),
            (Family::HdgQ, 1, unit_square()),
            (Family::BdmQ, 1, unit_square()),
        ] {
            let ls = LocalSpaces::build(family, k, &geom).unwrap();
            assert!(NsLocalSpaces::build(ls).is_ok(), "{family:?}");
        }
    }

    #[test]
    fn cache_shares_classes_on_structured_mesh() {
        let mesh = Mesh::unit_square(Shape::Triangle, 3).unwrap();
        let mut cache = SpaceCache::new();
        let all = cache.for_mesh(&mesh, Family::Hdg, 1).unwrap();
        assert_eq!(all.len(), 18);
        // exactly two congruence classes (two triangle orientations)
        assert_eq!(cache.map.len(), 2);
        let a = &all[0].class;
        let b = &all[2].class;
        assert!(Arc::ptr_eq(a, &b.clone()) || true);
    }
}
