//! Conforming 2D meshes of triangles or axis-aligned squares.
//!
//! Conventions:
//! - element vertices are stored counter-clockwise;
//! - triangle local faces: 0: v0-v1, 1: v1-v2, 2: v2-v0;
//! - square local faces: 0: bottom (v0-v1), 1: right, 2: top, 3: left;
//! - every face stores its endpoints in a canonical (lexicographic) order,
//!   which fixes the global parametrization `x(t) = a + t (b - a)` shared by
//!   both incident elements.
//!
//! Meshes are immutable after construction and safe to share across
//! assembly workers.

use crate::error::Error;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Shape {
    Triangle,
    Square,
}

impl Shape {
    pub fn vertices_per_element(self) -> usize {
        match self {
            Shape::Triangle => 3,
            Shape::Square => 4,
        }
    }
}

impl std::str::FromStr for Shape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triangle" => Ok(Shape::Triangle),
            "square" => Ok(Shape::Square),
            other => Err(Error::Parse(format!("unknown shape `{other}`"))),
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shape::Triangle => write!(f, "triangle"),
            Shape::Square => write!(f, "square"),
        }
    }
}

/// A mesh face (edge). `left` is always present; `right` is `None` on the
/// boundary.
#[derive(Clone, Debug)]
pub struct Face {
    /// Endpoint vertex ids in canonical (lexicographic) order.
    pub a: usize,
    pub b: usize,
    pub left: usize,
    pub right: Option<usize>,
}

impl Face {
    pub fn is_boundary(&self) -> bool {
        self.right.is_none()
    }
}

#[derive(Clone, Debug)]
pub struct Mesh {
    pub shape: Shape,
    pub vertices: Vec<[f64; 2]>,
    /// Vertex ids per element, counter-clockwise.
    pub elements: Vec<Vec<usize>>,
    pub faces: Vec<Face>,
    /// Global face id per element and local face.
    pub elem_faces: Vec<Vec<usize>>,
    /// Element diameters.
    pub h_k: Vec<f64>,
    /// Outward unit normal per element and local face.
    pub normals: Vec<Vec<[f64; 2]>>,
    /// Element areas.
    pub areas: Vec<f64>,
}

impl Mesh {
    /// Assembles face topology from raw vertices + connectivity, validating
    /// conformity (every face shared by at most two elements through exactly
    /// matching vertex pairs) and orientation.
    pub fn from_elements(
        shape: Shape,
        vertices: Vec<[f64; 2]>,
        elements: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let nv = vertices.len();
        let k = shape.vertices_per_element();
        for (e, conn) in elements.iter().enumerate() {
            if conn.len() != k {
                return Err(Error::Topology(format!(
                    "element {e} has {} vertices, expected {k}",
                    conn.len()
                )));
            }
            if conn.iter().any(|&v| v >= nv) {
                return Err(Error::Topology(format!("element {e} references missing vertex")));
            }
            let area = polygon_area(conn.iter().map(|&v| vertices[v]));
            if !(area > 0.0) {
                return Err(Error::Topology(format!(
                    "element {e} is degenerate or not counter-clockwise (signed area {area})"
                )));
            }
        }
        // face map keyed by sorted vertex pair
        let mut face_ids: std::collections::HashMap<(usize, usize), usize> =
            std::collections::HashMap::new();
        let mut faces: Vec<Face> = Vec::new();
        let mut elem_faces = vec![Vec::with_capacity(k); elements.len()];
        for (e, conn) in elements.iter().enumerate() {
            for lf in 0..k {
                let (va, vb) = (conn[lf], conn[(lf + 1) % k]);
                let key = (va.min(vb), va.max(vb));
                match face_ids.get(&key) {
                    None => {
                        let id = faces.len();
                        face_ids.insert(key, id);
                        let (ca, cb) = canonical_pair(&vertices, va, vb);
                        faces.push(Face {
                            a: ca,
                            b: cb,
                            left: e,
                            right: None,
                        });
                        elem_faces[e].push(id);
                    }
                    Some(&id) => {
                        if faces[id].right.is_some() {
                            return Err(Error::Topology(format!(
                                "face {:?} shared by more than two elements",
                                key
                            )));
                        }
                        faces[id].right = Some(e);
                        elem_faces[e].push(id);
                    }
                }
            }
        }
        let mut h_k = Vec::with_capacity(elements.len());
        let mut normals = Vec::with_capacity(elements.len());
        let mut areas = Vec::with_capacity(elements.len());
        for conn in &elements {
            let pts: Vec<[f64; 2]> = conn.iter().map(|&v| vertices[v]).collect();
            let mut h: f64 = 0.0;
            for i in 0..pts.len() {
                for j in (i + 1)..pts.len() {
                    h = h.max(dist(pts[i], pts[j]));
                }
            }
            h_k.push(h);
            areas.push(polygon_area(pts.iter().copied()));
            let mut ns = Vec::with_capacity(k);
            for lf in 0..k {
                let a = pts[lf];
                let b = pts[(lf + 1) % k];
                let len = dist(a, b);
                // outward for a CCW polygon
                ns.push([(b[1] - a[1]) / len, -(b[0] - a[0]) / len]);
            }
            normals.push(ns);
        }
        Ok(Self {
            shape,
            vertices,
            elements,
            faces,
            elem_faces,
            h_k,
            normals,
            areas,
        })
    }

    /// Structured mesh of the axis-aligned rectangle `[x0,x1] x [y0,y1]` with
    /// `n` subdivisions per side. Squares require the rectangle cells to be
    /// square. Triangles split each cell along the lower-left to upper-right
    /// diagonal.
    pub fn structured(shape: Shape, n: usize, rect: [f64; 4]) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("subdivision count n must be >= 1".into()));
        }
        let [x0, x1, y0, y1] = rect;
        if !(x1 > x0 && y1 > y0) {
            return Err(Error::InvalidArgument("empty domain rectangle".into()));
        }
        let dx = (x1 - x0) / n as f64;
        let dy = (y1 - y0) / n as f64;
        if shape == Shape::Square && (dx - dy).abs() > 1e-12 * dx.max(dy) {
            return Err(Error::InvalidArgument(
                "square elements need square grid cells".into(),
            ));
        }
        let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
        for j in 0..=n {
            for i in 0..=n {
                vertices.push([x0 + i as f64 * dx, y0 + j as f64 * dy]);
            }
        }
        let vid = |i: usize, j: usize| j * (n + 1) + i;
        let mut elements = Vec::new();
        for j in 0..n {
            for i in 0..n {
                let (p00, p10, p11, p01) = (vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1));
                match shape {
                    Shape::Square => elements.push(vec![p00, p10, p11, p01]),
                    Shape::Triangle => {
                        elements.push(vec![p00, p10, p11]);
                        elements.push(vec![p00, p11, p01]);
                    }
                }
            }
        }
        Self::from_elements(shape, vertices, elements)
    }

    /// Structured mesh on the unit square.
    pub fn unit_square(shape: Shape, n: usize) -> Result<Self> {
        Self::structured(shape, n, [0.0, 1.0, 0.0, 1.0])
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn n_boundary_faces(&self) -> usize {
        self.faces.iter().filter(|f| f.is_boundary()).count()
    }

    /// Largest element diameter.
    pub fn h(&self) -> f64 {
        self.h_k.iter().cloned().fold(0.0, f64::max)
    }

    /// Geometry view of one element (vertex coordinates, frame, faces).
    pub fn element_geom(&self, e: usize) -> ElementGeom {
        let conn = &self.elements[e];
        let pts: Vec<[f64; 2]> = conn.iter().map(|&v| self.vertices[v]).collect();
        let face_geoms = self.elem_faces[e]
            .iter()
            .map(|&fid| {
                let f = &self.faces[fid];
                FaceGeom::new(self.vertices[f.a], self.vertices[f.b])
            })
            .collect();
        ElementGeom::new(self.shape, pts, face_geoms)
    }

    /// Orientation sign of local face `lf` of element `e`: +1 when the
    /// element's CCW traversal matches the face's canonical direction.
    pub fn face_sign(&self, e: usize, lf: usize) -> f64 {
        let conn = &self.elements[e];
        let k = conn.len();
        let va = conn[lf];
        let f = &self.faces[self.elem_faces[e][lf]];
        debug_assert!(f.a == va || f.b == va);
        let _ = k;
        if f.a == va {
            1.0
        } else {
            -1.0
        }
    }

    /// Plain-text serialization: header `dim nv ne shape`, vertex lines,
    /// element lines with 0-based indices.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "2 {} {} {}\n",
            self.vertices.len(),
            self.elements.len(),
            self.shape
        ));
        for v in &self.vertices {
            s.push_str(&format!("{:.17} {:.17}\n", v[0], v[1]));
        }
        for e in &self.elements {
            let idx: Vec<String> = e.iter().map(|v| v.to_string()).collect();
            s.push_str(&idx.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = text.split_whitespace();
        let mut next = |what: &str| -> Result<&str> {
            tokens
                .next()
                .ok_or_else(|| Error::Parse(format!("unexpected end of mesh file, expected {what}")))
        };
        let dim: usize = parse(next("dim")?, "dim")?;
        if dim != 2 {
            return Err(Error::Parse(format!("only dim 2 supported, got {dim}")));
        }
        let nv: usize = parse(next("vertex count")?, "vertex count")?;
        let ne: usize = parse(next("element count")?, "element count")?;
        let shape: Shape = next("shape")?.parse()?;
        let mut vertices = Vec::with_capacity(nv);
        for i in 0..nv {
            let x: f64 = parse(next("vertex x")?, &format!("vertex {i} x"))?;
            let y: f64 = parse(next("vertex y")?, &format!("vertex {i} y"))?;
            vertices.push([x, y]);
        }
        let k = shape.vertices_per_element();
        let mut elements = Vec::with_capacity(ne);
        for e in 0..ne {
            let mut conn = Vec::with_capacity(k);
            for _ in 0..k {
                let v: usize = parse(next("element vertex")?, &format!("element {e} vertex"))?;
                conn.push(v);
            }
            elements.push(conn);
        }
        Self::from_elements(shape, vertices, elements)
    }
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Parse(format!("could not parse {what} from `{s}`")))
}

fn canonical_pair(vertices: &[[f64; 2]], va: usize, vb: usize) -> (usize, usize) {
    let (pa, pb) = (vertices[va], vertices[vb]);
    if (pa[0], pa[1]) <= (pb[0], pb[1]) {
        (va, vb)
    } else {
        (vb, va)
    }
}

fn polygon_area(pts: impl IntoIterator<Item = [f64; 2]>) -> f64 {
    let pts: Vec<[f64; 2]> = pts.into_iter().collect();
    let n = pts.len();
    let mut a = 0.0;
    for i in 0..n {
        let p = pts[i];
        let q = pts[(i + 1) % n];
        a += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * a
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Geometry of one face as seen from an element: endpoints in the canonical
/// global order, so both incident elements agree on the parametrization.
#[derive(Clone, Debug)]
pub struct FaceGeom {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub length: f64,
}

impl FaceGeom {
    pub fn new(a: [f64; 2], b: [f64; 2]) -> Self {
        Self {
            a,
            b,
            length: dist(a, b),
        }
    }

    pub fn point(&self, t: f64) -> [f64; 2] {
        [
            self.a[0] + t * (self.b[0] - self.a[0]),
            self.a[1] + t * (self.b[1] - self.a[1]),
        ]
    }

    /// Parameter of a physical point on the face line.
    pub fn param(&self, p: [f64; 2]) -> f64 {
        let d = [self.b[0] - self.a[0], self.b[1] - self.a[1]];
        ((p[0] - self.a[0]) * d[0] + (p[1] - self.a[1]) * d[1]) / (self.length * self.length)
    }
}

/// Per-element geometry: local coordinate frame and face layout.
///
/// Local coordinates are chosen so that the local space generators keep the
/// spans demanded by the space tables:
/// - triangles: `(x - centroid) / h` (translation + uniform scaling leaves
///   the triangle space families invariant),
/// - quadrilaterals: unit-square coordinates based at vertex 0 with axes
///   along the element edges (the square families are tied to the element's
///   own square coordinates).
#[derive(Clone, Debug)]
pub struct ElementGeom {
    pub shape: Shape,
    pub vertices: Vec<[f64; 2]>,
    pub centroid: [f64; 2],
    pub h: f64,
    pub area: f64,
    /// Orthonormal local axes (rows): local = frame * (x - origin) / scale.
    pub frame: [[f64; 2]; 2],
    pub origin: [f64; 2],
    pub scale: f64,
    pub faces: Vec<FaceGeom>,
    pub normals: Vec<[f64; 2]>,
}

impl ElementGeom {
    pub fn new(shape: Shape, vertices: Vec<[f64; 2]>, faces: Vec<FaceGeom>) -> Self {
        let n = vertices.len();
        let mut c = [0.0, 0.0];
        for v in &vertices {
            c[0] += v[0] / n as f64;
            c[1] += v[1] / n as f64;
        }
        let mut h: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                h = h.max(dist(vertices[i], vertices[j]));
            }
        }
        let area = polygon_area(vertices.iter().copied());
        let mut normals = Vec::with_capacity(n);
        for lf in 0..n {
            let a = vertices[lf];
            let b = vertices[(lf + 1) % n];
            let len = dist(a, b);
            normals.push([(b[1] - a[1]) / len, -(b[0] - a[0]) / len]);
        }
        let (frame, origin, scale) = match shape {
            Shape::Triangle => ([[1.0, 0.0], [0.0, 1.0]], c, h),
            Shape::Square => {
                let side = dist(vertices[0], vertices[1]);
                let e1 = [
                    (vertices[1][0] - vertices[0][0]) / side,
                    (vertices[1][1] - vertices[0][1]) / side,
                ];
                let e2 = [-e1[1], e1[0]];
                ([e1, e2], vertices[0], side)
            }
        };
        Self {
            shape,
            vertices,
            centroid: c,
            h,
            area,
            frame,
            origin,
            scale,
            faces,
            normals,
        }
    }

    /// Standalone geometry for a single element (unit tests, certification).
    /// Faces follow the element's own CCW order with canonical endpoint
    /// ordering.
    pub fn standalone(shape: Shape, vertices: Vec<[f64; 2]>) -> Self {
        let n = vertices.len();
        let faces = (0..n)
            .map(|lf| {
                let a = vertices[lf];
                let b = vertices[(lf + 1) % n];
                if (a[0], a[1]) <= (b[0], b[1]) {
                    FaceGeom::new(a, b)
                } else {
                    FaceGeom::new(b, a)
                }
            })
            .collect();
        Self::new(shape, vertices, faces)
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn local(&self, p: [f64; 2]) -> [f64; 2] {
        let d = [p[0] - self.origin[0], p[1] - self.origin[1]];
        [
            (self.frame[0][0] * d[0] + self.frame[0][1] * d[1]) / self.scale,
            (self.frame[1][0] * d[0] + self.frame[1][1] * d[1]) / self.scale,
        ]
    }

    /// Inverse of [`Self::local`].
    pub fn phys(&self, l: [f64; 2]) -> [f64; 2] {
        let v = self.vec_to_phys([l[0] * self.scale, l[1] * self.scale]);
        [self.origin[0] + v[0], self.origin[1] + v[1]]
    }

    /// Maps a local-frame vector to physical components.
    pub fn vec_to_phys(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.frame[0][0] * v[0] + self.frame[1][0] * v[1],
            self.frame[0][1] * v[0] + self.frame[1][1] * v[1],
        ]
    }

    /// Maps a physical vector to local-frame components.
    pub fn vec_to_local(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.frame[0][0] * v[0] + self.frame[0][1] * v[1],
            self.frame[1][0] * v[0] + self.frame[1][1] * v[1],
        ]
    }

    pub fn perimeter(&self) -> f64 {
        self.faces.iter().map(|f| f.length).sum()
    }

    /// Geometry-class key for caching: family-independent quantized local
    /// signature (relative vertex positions and face directions).
    pub fn class_key(&self) -> Vec<i64> {
        let q = |x: f64| (x * 1e12).round() as i64;
        let mut key = Vec::with_capacity(self.vertices.len() * 2 + self.faces.len() * 2 + 1);
        key.push(q(self.scale));
        for v in &self.vertices {
            let l = self.local(*v);
            key.push(q(l[0]));
            key.push(q(l[1]));
        }
        for f in &self.faces {
            let la = self.local(f.a);
            let lb = self.local(f.b);
            key.push(q(lb[0] - la[0]));
            key.push(q(lb[1] - la[1]));
        }
        key
    }
}
