//! 2D quadrilateral meshes with oriented faces and hanging-node support.
//!
//! Conventions:
//! - Element corners are stored counter-clockwise; the bilinear map from the
//!   reference square must have positive Jacobian (elements are convex).
//! - Every face stores a unit normal that points out of its `owner`. For
//!   interior faces the owner is the element with the lower index; boundary
//!   normals point out of the domain.
//! - Local refinement keeps meshes 1-irregular. A coarse/fine interface is
//!   represented only by the two fine sub-faces; the coarse element lists
//!   both among its boundary faces, and the midpoint node carries a hanging
//!   constraint against the two parent nodes.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fem;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("mesh validation failed: {0}")]
    Validation(String),
    #[error("geometry failure: {0}")]
    Geometry(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Point {
        Point { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaceMarker {
    Interior,
    Dirichlet,
    Neumann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryCondition {
    Dirichlet,
    Neumann,
}

impl BoundaryCondition {
    fn marker(self) -> FaceMarker {
        match self {
            BoundaryCondition::Dirichlet => FaceMarker::Dirichlet,
            BoundaryCondition::Neumann => FaceMarker::Neumann,
        }
    }
}

/// Boundary condition per side of a generated rectangular mesh.
#[derive(Debug, Clone, Copy)]
pub struct SideMarkers {
    pub left: BoundaryCondition,
    pub right: BoundaryCondition,
    pub bottom: BoundaryCondition,
    pub top: BoundaryCondition,
}

impl SideMarkers {
    /// Dirichlet left/right, no-flow top/bottom: the layout of all
    /// pressure-driven cases in the experiment catalog.
    pub fn flow_in_x() -> SideMarkers {
        SideMarkers {
            left: BoundaryCondition::Dirichlet,
            right: BoundaryCondition::Dirichlet,
            bottom: BoundaryCondition::Neumann,
            top: BoundaryCondition::Neumann,
        }
    }

    pub fn all_neumann() -> SideMarkers {
        SideMarkers {
            left: BoundaryCondition::Neumann,
            right: BoundaryCondition::Neumann,
            bottom: BoundaryCondition::Neumann,
            top: BoundaryCondition::Neumann,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Face {
    /// Endpoint node indices, ordered along the owner's counter-clockwise
    /// traversal so that rotating the tangent by -90 degrees gives `normal`.
    pub nodes: [usize; 2],
    pub owner: usize,
    pub neighbor: Option<usize>,
    pub normal: [f64; 2],
    pub measure: f64,
    pub marker: FaceMarker,
}

#[derive(Debug, Clone)]
pub struct Element {
    /// Corner node indices in counter-clockwise order.
    pub vertices: [usize; 4],
    /// Faces forming the element boundary; more than four when the element
    /// borders refined neighbors.
    pub faces: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HangingConstraint {
    pub node: usize,
    pub parents: [usize; 2],
    pub weights: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct Mesh {
    pub nodes: Vec<Point>,
    pub elements: Vec<Element>,
    pub faces: Vec<Face>,
    pub constraints: Vec<HangingConstraint>,
}

#[derive(Debug, Clone, Copy)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn unit() -> Rect {
        Rect {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }
}

fn key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn face_geometry(nodes: &[Point], a: usize, b: usize) -> ([f64; 2], f64) {
    let dx = nodes[b].x - nodes[a].x;
    let dy = nodes[b].y - nodes[a].y;
    let len = (dx * dx + dy * dy).sqrt();
    ([dy / len, -dx / len], len)
}

/// Build faces, hanging constraints and per-element face lists from element
/// connectivity. `split_mid` maps a (sorted) parent edge to its midpoint
/// node for every edge that is split on one side.
fn build_topology(
    nodes: &[Point],
    elems: &[[usize; 4]],
    split_mid: &HashMap<(usize, usize), usize>,
    marker_of: &dyn Fn(usize, usize) -> Result<FaceMarker, MeshError>,
) -> Result<(Vec<Face>, Vec<HangingConstraint>, Vec<Vec<usize>>), MeshError> {
    let mut edge_use: HashMap<(usize, usize), Vec<(usize, usize, usize)>> = HashMap::new();
    for (e, quad) in elems.iter().enumerate() {
        for k in 0..4 {
            let a = quad[k];
            let b = quad[(k + 1) % 4];
            edge_use.entry(key(a, b)).or_default().push((e, a, b));
        }
    }
    for (k, uses) in &edge_use {
        if uses.len() > 2 {
            return Err(MeshError::Validation(format!(
                "edge {:?} shared by more than two elements",
                k
            )));
        }
    }
    let mid_parent: HashMap<usize, (usize, usize)> =
        split_mid.iter().map(|(&e, &m)| (m, e)).collect();

    let mut faces: Vec<Face> = Vec::new();
    let mut constraints: Vec<HangingConstraint> = Vec::new();
    let mut visited: HashSet<(usize, usize)> = HashSet::new();

    let single_use = |k: &(usize, usize)| -> Option<(usize, usize, usize)> {
        match edge_use.get(k) {
            Some(u) if u.len() == 1 => Some(u[0]),
            _ => None,
        }
    };

    // Emits the two sub-faces of a split edge. `(ca, cb)` is the parent edge
    // in the coarse element's traversal direction, `m` its midpoint.
    let emit_split = |ce: usize,
                      ca: usize,
                      cb: usize,
                      m: usize,
                      faces: &mut Vec<Face>,
                      constraints: &mut Vec<HangingConstraint>,
                      visited: &mut HashSet<(usize, usize)>|
     -> Result<(), MeshError> {
        for (p, q) in [(ca, m), (m, cb)] {
            let (fe, fa, fb) = single_use(&key(p, q)).ok_or_else(|| {
                MeshError::Validation(format!("dangling sub-edge ({p}, {q}) of a split edge"))
            })?;
            let (owner, neighbor, n0, n1) = if ce < fe {
                (ce, fe, p, q)
            } else {
                (fe, ce, fa, fb)
            };
            let (normal, measure) = face_geometry(nodes, n0, n1);
            faces.push(Face {
                nodes: [n0, n1],
                owner,
                neighbor: Some(neighbor),
                normal,
                measure,
                marker: FaceMarker::Interior,
            });
            visited.insert(key(p, q));
        }
        visited.insert(key(ca, cb));
        constraints.push(HangingConstraint {
            node: m,
            parents: [ca, cb],
            weights: [0.5, 0.5],
        });
        Ok(())
    };

    for (e, quad) in elems.iter().enumerate() {
        for k_local in 0..4 {
            let a = quad[k_local];
            let b = quad[(k_local + 1) % 4];
            let kk = key(a, b);
            if visited.contains(&kk) {
                continue;
            }
            let uses = &edge_use[&kk];
            if uses.len() == 2 {
                let (e1, a1, b1) = uses[0];
                let (e2, a2, b2) = uses[1];
                let (owner, neighbor, n0, n1) = if e1 < e2 {
                    (e1, e2, a1, b1)
                } else {
                    (e2, e1, a2, b2)
                };
                let (normal, measure) = face_geometry(nodes, n0, n1);
                faces.push(Face {
                    nodes: [n0, n1],
                    owner,
                    neighbor: Some(neighbor),
                    normal,
                    measure,
                    marker: FaceMarker::Interior,
                });
                visited.insert(kk);
                continue;
            }
            // This edge belongs to one element only: it is the coarse side of
            // a split edge, half of one, or a boundary face.
            if let Some(&m) = split_mid.get(&kk) {
                if single_use(&key(a, m)).is_some() && single_use(&key(m, b)).is_some() {
                    emit_split(e, a, b, m, &mut faces, &mut constraints, &mut visited)?;
                    continue;
                }
            }
            let mut handled = false;
            for cand in [a, b] {
                if let Some(&(pa, pb)) = mid_parent.get(&cand) {
                    let pk = key(pa, pb);
                    if visited.contains(&pk) {
                        continue;
                    }
                    if let Some((ce, ca, cb)) = single_use(&pk) {
                        if ce != e
                            && single_use(&key(ca, cand)).is_some()
                            && single_use(&key(cand, cb)).is_some()
                        {
                            emit_split(ce, ca, cb, cand, &mut faces, &mut constraints, &mut visited)?;
                            handled = true;
                            break;
                        }
                    }
                }
            }
            if handled {
                continue;
            }
            let marker = marker_of(a, b)?;
            let (normal, measure) = face_geometry(nodes, a, b);
            faces.push(Face {
                nodes: [a, b],
                owner: e,
                neighbor: None,
                normal,
                measure,
                marker,
            });
            visited.insert(kk);
        }
    }

    let mut elem_faces = vec![Vec::new(); elems.len()];
    for (i, f) in faces.iter().enumerate() {
        elem_faces[f.owner].push(i);
        if let Some(nb) = f.neighbor {
            elem_faces[nb].push(i);
        }
    }
    Ok((faces, constraints, elem_faces))
}

fn assemble_mesh(
    nodes: Vec<Point>,
    corners: Vec<[usize; 4]>,
    split_mid: &HashMap<(usize, usize), usize>,
    marker_of: &dyn Fn(usize, usize) -> Result<FaceMarker, MeshError>,
) -> Result<Mesh, MeshError> {
    let (faces, constraints, elem_faces) = build_topology(&nodes, &corners, split_mid, marker_of)?;
    let elements = corners
        .into_iter()
        .zip(elem_faces)
        .map(|(vertices, faces)| Element { vertices, faces })
        .collect();
    let mesh = Mesh {
        nodes,
        elements,
        faces,
        constraints,
    };
    mesh.validate()?;
    Ok(mesh)
}

/// Tensor-product mesh from strictly increasing axis breakpoints.
pub fn build_tensor(xs: &[f64], ys: &[f64], bc: SideMarkers) -> Result<Mesh, MeshError> {
    if xs.len() < 2 || ys.len() < 2 {
        return Err(MeshError::InvalidArgument(
            "need at least one cell in each direction".into(),
        ));
    }
    for w in xs.windows(2).chain(ys.windows(2)) {
        if w[1] <= w[0] {
            return Err(MeshError::InvalidArgument(
                "axis breakpoints must be strictly increasing".into(),
            ));
        }
    }
    let nx = xs.len() - 1;
    let ny = ys.len() - 1;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for y in ys {
        for x in xs {
            nodes.push(Point::new(*x, *y));
        }
    }
    let node = |i: usize, j: usize| j * (nx + 1) + i;
    let mut corners = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            corners.push([node(i, j), node(i + 1, j), node(i + 1, j + 1), node(i, j + 1)]);
        }
    }
    let (x0, x1) = (xs[0], xs[nx]);
    let (y0, y1) = (ys[0], ys[ny]);
    let marker_nodes = nodes.clone();
    let marker_of = move |a: usize, b: usize| -> Result<FaceMarker, MeshError> {
        let (pa, pb) = (marker_nodes[a], marker_nodes[b]);
        let side = if pa.x == x0 && pb.x == x0 {
            bc.left
        } else if pa.x == x1 && pb.x == x1 {
            bc.right
        } else if pa.y == y0 && pb.y == y0 {
            bc.bottom
        } else if pa.y == y1 && pb.y == y1 {
            bc.top
        } else {
            return Err(MeshError::Validation(format!(
                "boundary edge ({a}, {b}) not on any side of the bounding box"
            )));
        };
        Ok(side.marker())
    };
    assemble_mesh(nodes, corners, &HashMap::new(), &marker_of)
}

/// Uniform Cartesian mesh with `nx` by `ny` cells over `bounds`. Element
/// indices are row-major from the lower-left corner.
pub fn build_cartesian(
    nx: usize,
    ny: usize,
    bounds: Rect,
    bc: SideMarkers,
) -> Result<Mesh, MeshError> {
    if nx == 0 || ny == 0 {
        return Err(MeshError::InvalidArgument("cell counts must be positive".into()));
    }
    if bounds.x1 <= bounds.x0 || bounds.y1 <= bounds.y0 {
        return Err(MeshError::InvalidArgument("degenerate bounding box".into()));
    }
    let xs: Vec<f64> = (0..=nx)
        .map(|i| bounds.x0 + (bounds.x1 - bounds.x0) * i as f64 / nx as f64)
        .collect();
    let ys: Vec<f64> = (0..=ny)
        .map(|j| bounds.y0 + (bounds.y1 - bounds.y0) * j as f64 / ny as f64)
        .collect();
    build_tensor(&xs, &ys, bc)
}

/// Split the selected cells in four at the edge midpoints. Fails if the
/// result would violate 1-irregularity (a face bordering elements more than
/// one refinement level apart).
pub fn refine_cells(mesh: &Mesh, cells: &[usize]) -> Result<Mesh, MeshError> {
    let set: BTreeSet<usize> = cells.iter().copied().collect();
    for &c in &set {
        if c >= mesh.elements.len() {
            return Err(MeshError::InvalidArgument(format!(
                "cell index {c} out of range"
            )));
        }
    }
    // Refining the fine side of an existing coarse/fine interface without
    // refining the coarse side would make that interface 2-irregular.
    for face in &mesh.faces {
        if let Some((coarse, fine)) = mesh.split_face_sides(face) {
            if set.contains(&fine) && !set.contains(&coarse) {
                return Err(MeshError::InvalidArgument(format!(
                    "refining cell {fine} would leave the interface to cell {coarse} 2-irregular"
                )));
            }
        }
    }

    let mut nodes = mesh.nodes.clone();
    let mut split_mid: HashMap<(usize, usize), usize> = mesh
        .constraints
        .iter()
        .map(|c| (key(c.parents[0], c.parents[1]), c.node))
        .collect();
    let mut corners: Vec<[usize; 4]> = Vec::new();
    for (e, elem) in mesh.elements.iter().enumerate() {
        let v = elem.vertices;
        if !set.contains(&e) {
            corners.push(v);
            continue;
        }
        let mut mid = [0usize; 4];
        for k in 0..4 {
            let (a, b) = (v[k], v[(k + 1) % 4]);
            mid[k] = *split_mid.entry(key(a, b)).or_insert_with(|| {
                nodes.push(Point::new(
                    0.5 * (nodes[a].x + nodes[b].x),
                    0.5 * (nodes[a].y + nodes[b].y),
                ));
                nodes.len() - 1
            });
        }
        let center = {
            let cx = v.iter().map(|&i| nodes[i].x).sum::<f64>() / 4.0;
            let cy = v.iter().map(|&i| nodes[i].y).sum::<f64>() / 4.0;
            nodes.push(Point::new(cx, cy));
            nodes.len() - 1
        };
        corners.push([v[0], mid[0], center, mid[3]]);
        corners.push([mid[0], v[1], mid[1], center]);
        corners.push([center, mid[1], v[2], mid[2]]);
        corners.push([mid[3], center, mid[2], v[3]]);
    }

    let boundary_markers: HashMap<(usize, usize), FaceMarker> = mesh
        .faces
        .iter()
        .filter(|f| f.neighbor.is_none())
        .map(|f| (key(f.nodes[0], f.nodes[1]), f.marker))
        .collect();
    let mid_parent: HashMap<usize, (usize, usize)> =
        split_mid.iter().map(|(&e, &m)| (m, e)).collect();
    let marker_of = |a: usize, b: usize| -> Result<FaceMarker, MeshError> {
        if let Some(m) = boundary_markers.get(&key(a, b)) {
            return Ok(*m);
        }
        for cand in [a, b] {
            if let Some(&(pa, pb)) = mid_parent.get(&cand) {
                if let Some(m) = boundary_markers.get(&key(pa, pb)) {
                    return Ok(*m);
                }
            }
        }
        Err(MeshError::Validation(format!(
            "cannot inherit a boundary marker for edge ({a}, {b})"
        )))
    };
    assemble_mesh(nodes, corners, &split_mid, &marker_of)
}

/// Split every cell in four. Never introduces irregularity beyond what the
/// input already has.
pub fn refine_global(mesh: &Mesh) -> Mesh {
    let all: Vec<usize> = (0..mesh.elements.len()).collect();
    refine_cells(mesh, &all).expect("global refinement preserves 1-irregularity")
}

/// Perturb node positions by a deterministic pseudo-random offset bounded by
/// `magnitude` times the shortest incident edge. Boundary nodes move only
/// tangentially, corner nodes stay fixed, hanging nodes are re-interpolated
/// from their parents. Retries with halved magnitude if an element turns
/// non-convex; fails after five halvings.
pub fn distort(mesh: &Mesh, magnitude: f64, seed: u64) -> Result<Mesh, MeshError> {
    if !(0.0..0.5).contains(&magnitude) {
        return Err(MeshError::InvalidArgument(format!(
            "distortion magnitude {magnitude} outside [0, 0.5)"
        )));
    }
    let n = mesh.nodes.len();
    let mut min_edge = vec![f64::INFINITY; n];
    for f in &mesh.faces {
        for i in f.nodes {
            min_edge[i] = min_edge[i].min(f.measure);
        }
    }
    // Boundary nodes: collect tangent directions; a node with two
    // non-parallel boundary tangents is a corner and stays put.
    #[derive(Clone)]
    enum NodeKind {
        Interior,
        Boundary([f64; 2]),
        Fixed,
    }
    let mut kind = vec![NodeKind::Interior; n];
    for f in &mesh.faces {
        if f.neighbor.is_some() {
            continue;
        }
        let tangent = [-f.normal[1], f.normal[0]];
        for i in f.nodes {
            kind[i] = match &kind[i] {
                NodeKind::Interior => NodeKind::Boundary(tangent),
                NodeKind::Boundary(t) => {
                    let cross = t[0] * tangent[1] - t[1] * tangent[0];
                    if cross.abs() > 1e-9 {
                        NodeKind::Fixed
                    } else {
                        NodeKind::Boundary(*t)
                    }
                }
                NodeKind::Fixed => NodeKind::Fixed,
            };
        }
    }
    let hanging: HashSet<usize> = mesh.constraints.iter().map(|c| c.node).collect();

    let mut mag = magnitude;
    for _attempt in 0..=5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = mesh.clone();
        for i in 0..n {
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let radius: f64 = rng.gen_range(0.0..1.0) * mag * min_edge[i];
            if hanging.contains(&i) {
                continue;
            }
            match kind[i] {
                NodeKind::Interior => {
                    out.nodes[i].x += radius * angle.cos();
                    out.nodes[i].y += radius * angle.sin();
                }
                NodeKind::Boundary(t) => {
                    let shift = (2.0 * (angle / std::f64::consts::TAU) - 1.0) * mag * min_edge[i];
                    out.nodes[i].x += shift * t[0];
                    out.nodes[i].y += shift * t[1];
                }
                NodeKind::Fixed => {}
            }
        }
        for c in &mesh.constraints {
            let p0 = out.nodes[c.parents[0]];
            let p1 = out.nodes[c.parents[1]];
            out.nodes[c.node] =
                Point::new(c.weights[0] * p0.x + c.weights[1] * p1.x, c.weights[0] * p0.y + c.weights[1] * p1.y);
        }
        if out.all_elements_convex() {
            out.refresh_face_geometry();
            out.validate()?;
            return Ok(out);
        }
        mag *= 0.5;
    }
    Err(MeshError::Geometry(format!(
        "distortion produced non-convex elements even after halving the magnitude five times (seed {seed})"
    )))
}

impl Mesh {
    pub fn corner_coords(&self, e: usize) -> [[f64; 2]; 4] {
        let v = self.elements[e].vertices;
        [
            [self.nodes[v[0]].x, self.nodes[v[0]].y],
            [self.nodes[v[1]].x, self.nodes[v[1]].y],
            [self.nodes[v[2]].x, self.nodes[v[2]].y],
            [self.nodes[v[3]].x, self.nodes[v[3]].y],
        ]
    }

    /// Element area by the shoelace formula (edges are straight).
    pub fn area(&self, e: usize) -> f64 {
        let c = self.corner_coords(e);
        0.5 * ((c[0][0] * c[1][1] - c[1][0] * c[0][1])
            + (c[1][0] * c[2][1] - c[2][0] * c[1][1])
            + (c[2][0] * c[3][1] - c[3][0] * c[2][1])
            + (c[3][0] * c[0][1] - c[0][0] * c[3][1]))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.elements.len()).map(|e| self.area(e)).sum()
    }

    /// Image of the reference-square center under the bilinear map.
    pub fn centroid(&self, e: usize) -> [f64; 2] {
        let c = self.corner_coords(e);
        [
            0.25 * (c[0][0] + c[1][0] + c[2][0] + c[3][0]),
            0.25 * (c[0][1] + c[1][1] + c[2][1] + c[3][1]),
        ]
    }

    pub fn diameter(&self, e: usize) -> f64 {
        let c = self.corner_coords(e);
        let mut d: f64 = 0.0;
        for i in 0..4 {
            for j in i + 1..4 {
                d = d.max(((c[i][0] - c[j][0]).powi(2) + (c[i][1] - c[j][1]).powi(2)).sqrt());
            }
        }
        d
    }

    pub fn max_diameter(&self) -> f64 {
        (0..self.elements.len())
            .map(|e| self.diameter(e))
            .fold(0.0, f64::max)
    }

    /// +1 if `e` owns the face (normal points out of `e`), -1 otherwise.
    pub fn face_sign(&self, f: usize, e: usize) -> f64 {
        let face = &self.faces[f];
        if face.owner == e {
            1.0
        } else {
            debug_assert_eq!(face.neighbor, Some(e));
            -1.0
        }
    }

    pub fn face_midpoint(&self, f: usize) -> [f64; 2] {
        let [a, b] = self.faces[f].nodes;
        [
            0.5 * (self.nodes[a].x + self.nodes[b].x),
            0.5 * (self.nodes[a].y + self.nodes[b].y),
        ]
    }

    /// The two Gauss points of a face, in the fixed parameter order of
    /// [`fem::face_gauss_params`].
    pub fn face_gauss_points(&self, f: usize) -> [[f64; 2]; 2] {
        let [a, b] = self.faces[f].nodes;
        let (pa, pb) = (self.nodes[a], self.nodes[b]);
        fem::face_gauss_params().map(|s| [pa.x + s * (pb.x - pa.x), pa.y + s * (pb.y - pa.y)])
    }

    /// Reference coordinates of a face's endpoints on an adjacent element.
    /// Works for hanging sub-faces: the bilinear map is affine along each
    /// straight edge, so edge parameters transfer directly.
    pub fn face_ref_endpoints(&self, f: usize, e: usize) -> ([f64; 2], [f64; 2]) {
        self.try_face_ref_endpoints(f, e)
            .unwrap_or_else(|| panic!("face {f} is not on the boundary of element {e}"))
    }

    fn try_face_ref_endpoints(&self, f: usize, e: usize) -> Option<([f64; 2], [f64; 2])> {
        let corners = self.corner_coords(e);
        let [na, nb] = self.faces[f].nodes;
        let pts = [
            [self.nodes[na].x, self.nodes[na].y],
            [self.nodes[nb].x, self.nodes[nb].y],
        ];
        for k in 0..4 {
            let a = corners[k];
            let b = corners[(k + 1) % 4];
            let ex = b[0] - a[0];
            let ey = b[1] - a[1];
            let len2 = ex * ex + ey * ey;
            let tol = 1e-9 * len2.sqrt();
            let mut params = [0.0; 2];
            let mut on_edge = true;
            for (slot, p) in pts.iter().enumerate() {
                let t = ((p[0] - a[0]) * ex + (p[1] - a[1]) * ey) / len2;
                let proj = [a[0] + t * ex, a[1] + t * ey];
                let dist = ((p[0] - proj[0]).powi(2) + (p[1] - proj[1]).powi(2)).sqrt();
                if dist > tol || !(-1e-9..=1.0 + 1e-9).contains(&t) {
                    on_edge = false;
                    break;
                }
                params[slot] = t;
            }
            if on_edge {
                let ra = fem::REF_CORNERS[k];
                let rb = fem::REF_CORNERS[(k + 1) % 4];
                let map = |t: f64| [ra[0] + t * (rb[0] - ra[0]), ra[1] + t * (rb[1] - ra[1])];
                return Some((map(params[0]), map(params[1])));
            }
        }
        None
    }

    /// For a coarse/fine interface sub-face, the (coarse, fine) element pair.
    /// Returns None for regular faces and boundary faces.
    pub fn split_face_sides(&self, face: &Face) -> Option<(usize, usize)> {
        let nb = face.neighbor?;
        let has_both = |e: usize| {
            let v = &self.elements[e].vertices;
            face.nodes.iter().all(|n| v.contains(n))
        };
        match (has_both(face.owner), has_both(nb)) {
            (true, false) => Some((nb, face.owner)),
            (false, true) => Some((face.owner, nb)),
            _ => None,
        }
    }

    pub fn is_pure_neumann(&self) -> bool {
        !self.faces.iter().any(|f| f.marker == FaceMarker::Dirichlet)
    }

    /// Sorted indices of all nodes lying on Dirichlet faces.
    pub fn dirichlet_nodes(&self) -> Vec<usize> {
        let mut set = BTreeSet::new();
        for f in &self.faces {
            if f.marker == FaceMarker::Dirichlet {
                set.insert(f.nodes[0]);
                set.insert(f.nodes[1]);
            }
        }
        set.into_iter().collect()
    }

    /// Per-node hanging-constraint parents, indexable by node id.
    pub fn constraint_table(&self) -> Vec<Option<[usize; 2]>> {
        let mut t = vec![None; self.nodes.len()];
        for c in &self.constraints {
            t[c.node] = Some(c.parents);
        }
        t
    }

    fn all_elements_convex(&self) -> bool {
        (0..self.elements.len()).all(|e| {
            let c = self.corner_coords(e);
            // the Jacobian determinant of the bilinear map is affine, so
            // positivity at the corners implies positivity everywhere
            (0..4).all(|k| {
                let p = c[k];
                let q = c[(k + 1) % 4];
                let r = c[(k + 3) % 4];
                (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]) > 0.0
            })
        })
    }

    fn refresh_face_geometry(&mut self) {
        for f in &mut self.faces {
            let (normal, measure) = face_geometry(&self.nodes, f.nodes[0], f.nodes[1]);
            f.normal = normal;
            f.measure = measure;
        }
    }

    /// Move every node through a coordinate map, keeping the topology. The
    /// map must take boundary nodes to the (new) boundary consistently;
    /// hanging nodes are re-interpolated from their parents afterwards.
    pub fn map_nodes(&self, map: impl Fn(f64, f64) -> (f64, f64)) -> Result<Mesh, MeshError> {
        let mut out = self.clone();
        for p in &mut out.nodes {
            let (x, y) = map(p.x, p.y);
            p.x = x;
            p.y = y;
        }
        for c in &self.constraints {
            let p0 = out.nodes[c.parents[0]];
            let p1 = out.nodes[c.parents[1]];
            out.nodes[c.node] = Point::new(
                c.weights[0] * p0.x + c.weights[1] * p1.x,
                c.weights[0] * p0.y + c.weights[1] * p1.y,
            );
        }
        out.refresh_face_geometry();
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        for (i, p) in self.nodes.iter().enumerate() {
            if !p.x.is_finite() || !p.y.is_finite() {
                return Err(MeshError::Validation(format!("node {i} is not finite")));
            }
        }
        for (e, elem) in self.elements.iter().enumerate() {
            for &v in &elem.vertices {
                if v >= self.nodes.len() {
                    return Err(MeshError::Validation(format!(
                        "element {e} references missing node {v}"
                    )));
                }
            }
            if elem.faces.len() < 4 {
                return Err(MeshError::Validation(format!(
                    "element {e} has fewer than four faces"
                )));
            }
        }
        if !self.all_elements_convex() {
            return Err(MeshError::Validation("non-convex element".into()));
        }
        let scale = self.max_diameter().max(1e-300);
        for (i, f) in self.faces.iter().enumerate() {
            let norm = (f.normal[0] * f.normal[0] + f.normal[1] * f.normal[1]).sqrt();
            if (norm - 1.0).abs() > 1e-12 {
                return Err(MeshError::Validation(format!("face {i} normal not unit")));
            }
            if f.measure <= 0.0 {
                return Err(MeshError::Validation(format!(
                    "face {i} has non-positive measure"
                )));
            }
            match (f.marker, f.neighbor) {
                (FaceMarker::Interior, None) => {
                    return Err(MeshError::Validation(format!(
                        "interior face {i} lacks a neighbor"
                    )))
                }
                (FaceMarker::Dirichlet | FaceMarker::Neumann, Some(_)) => {
                    return Err(MeshError::Validation(format!(
                        "boundary face {i} has a neighbor"
                    )))
                }
                _ => {}
            }
        }
        // each element boundary must close up: sum of signed face normals
        // scaled by measure vanishes for a closed polygon
        for (e, elem) in self.elements.iter().enumerate() {
            let mut sx = 0.0;
            let mut sy = 0.0;
            for &f in &elem.faces {
                let s = self.face_sign(f, e);
                sx += s * self.faces[f].normal[0] * self.faces[f].measure;
                sy += s * self.faces[f].normal[1] * self.faces[f].measure;
            }
            if sx.abs() > 1e-10 * scale || sy.abs() > 1e-10 * scale {
                return Err(MeshError::Validation(format!(
                    "element {e} boundary does not close (residual normal {sx:.2e}, {sy:.2e})"
                )));
            }
        }
        let constrained: HashSet<usize> = self.constraints.iter().map(|c| c.node).collect();
        for c in &self.constraints {
            if (c.weights[0] + c.weights[1] - 1.0).abs() > 1e-12 {
                return Err(MeshError::Validation(format!(
                    "constraint on node {} has weights not summing to one",
                    c.node
                )));
            }
            for p in c.parents {
                if constrained.contains(&p) {
                    return Err(MeshError::Validation(format!(
                        "node {} is constrained against constrained node {p}; mesh is more than 1-irregular",
                        c.node
                    )));
                }
            }
            let p0 = self.nodes[c.parents[0]];
            let p1 = self.nodes[c.parents[1]];
            let m = self.nodes[c.node];
            let dx = m.x - (c.weights[0] * p0.x + c.weights[1] * p1.x);
            let dy = m.y - (c.weights[0] * p0.y + c.weights[1] * p1.y);
            if (dx * dx + dy * dy).sqrt() > 1e-12 * scale.max(1.0) {
                return Err(MeshError::Validation(format!(
                    "hanging node {} does not interpolate its parents",
                    c.node
                )));
            }
        }
        Ok(())
    }
}

const MESH_HEADER: &str = "MESH2D v1";

pub fn save_mesh(mesh: &Mesh, path: &Path) -> Result<(), MeshError> {
    let mut out = String::new();
    writeln!(out, "{MESH_HEADER}").unwrap();
    writeln!(out, "NODES {}", mesh.nodes.len()).unwrap();
    for p in &mesh.nodes {
        writeln!(out, "{:.16e} {:.16e}", p.x, p.y).unwrap();
    }
    writeln!(out, "ELEMS {}", mesh.elements.len()).unwrap();
    for e in &mesh.elements {
        let v = e.vertices;
        writeln!(out, "{} {} {} {}", v[0], v[1], v[2], v[3]).unwrap();
    }
    writeln!(out, "FACES {}", mesh.faces.len()).unwrap();
    for f in &mesh.faces {
        let marker = match f.marker {
            FaceMarker::Interior => 0,
            FaceMarker::Dirichlet => 1,
            FaceMarker::Neumann => 2,
        };
        writeln!(
            out,
            "{} {} {} {} {}",
            f.nodes[0],
            f.nodes[1],
            f.owner,
            f.neighbor.map(|n| n as i64).unwrap_or(-1),
            marker
        )
        .unwrap();
    }
    writeln!(out, "CONSTRAINTS {}", mesh.constraints.len()).unwrap();
    for c in &mesh.constraints {
        writeln!(out, "{} {} {}", c.node, c.parents[0], c.parents[1]).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_mesh(path: &Path) -> Result<Mesh, MeshError> {
    let text = std::fs::read_to_string(path)?;
    parse_mesh(&text)
}

pub fn parse_mesh(text: &str) -> Result<Mesh, MeshError> {
    let mut lines = text.lines().enumerate();
    let mut next_line = |what: &str| -> Result<(usize, &str), MeshError> {
        for (i, line) in lines.by_ref() {
            let t = line.trim();
            if !t.is_empty() {
                return Ok((i + 1, t));
            }
        }
        Err(MeshError::Parse {
            line: 0,
            message: format!("unexpected end of file, expected {what}"),
        })
    };
    let perr = |line: usize, message: String| MeshError::Parse { line, message };

    let (ln, header) = next_line("header")?;
    if header != MESH_HEADER {
        return Err(perr(ln, format!("expected '{MESH_HEADER}', got '{header}'")));
    }
    let parse_count = |line: usize, text: &str, tag: &str| -> Result<usize, MeshError> {
        let mut it = text.split_whitespace();
        match (it.next(), it.next(), it.next()) {
            (Some(t), Some(n), None) if t == tag => n
                .parse()
                .map_err(|_| perr(line, format!("invalid count '{n}'"))),
            _ => Err(perr(line, format!("expected '{tag} <count>'"))),
        }
    };

    let (ln, l) = next_line("NODES")?;
    let n_nodes = parse_count(ln, l, "NODES")?;
    let mut nodes = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        let (ln, l) = next_line("node coordinates")?;
        let vals: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| perr(ln, format!("invalid coordinate: {e}")))?;
        if vals.len() != 2 {
            return Err(perr(ln, "expected 'x y'".into()));
        }
        nodes.push(Point::new(vals[0], vals[1]));
    }

    let (ln, l) = next_line("ELEMS")?;
    let n_elems = parse_count(ln, l, "ELEMS")?;
    let mut corners = Vec::with_capacity(n_elems);
    for _ in 0..n_elems {
        let (ln, l) = next_line("element corners")?;
        let vals: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| perr(ln, format!("invalid node index: {e}")))?;
        if vals.len() != 4 {
            return Err(perr(ln, "expected four node indices".into()));
        }
        corners.push([vals[0], vals[1], vals[2], vals[3]]);
    }

    let (ln, l) = next_line("FACES")?;
    let n_faces = parse_count(ln, l, "FACES")?;
    let mut faces = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let (ln, l) = next_line("face record")?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != 5 {
            return Err(perr(ln, "expected 'n0 n1 owner neighbor marker'".into()));
        }
        let parse_idx = |t: &str| -> Result<usize, MeshError> {
            t.parse().map_err(|_| perr(ln, format!("invalid index '{t}'")))
        };
        let n0 = parse_idx(toks[0])?;
        let n1 = parse_idx(toks[1])?;
        let owner = parse_idx(toks[2])?;
        let neighbor: i64 = toks[3]
            .parse()
            .map_err(|_| perr(ln, format!("invalid neighbor '{}'", toks[3])))?;
        let marker = match toks[4] {
            "0" => FaceMarker::Interior,
            "1" => FaceMarker::Dirichlet,
            "2" => FaceMarker::Neumann,
            other => {
                return Err(perr(
                    ln,
                    format!("invalid face marker '{other}', expected 0, 1 or 2"),
                ))
            }
        };
        if n0.max(n1) >= nodes.len() {
            return Err(perr(ln, "face endpoint out of range".into()));
        }
        let (normal, measure) = face_geometry(&nodes, n0, n1);
        faces.push(Face {
            nodes: [n0, n1],
            owner,
            neighbor: if neighbor < 0 { None } else { Some(neighbor as usize) },
            normal,
            measure,
            marker,
        });
    }

    let (ln, l) = next_line("CONSTRAINTS")?;
    let n_constraints = parse_count(ln, l, "CONSTRAINTS")?;
    let mut constraints = Vec::with_capacity(n_constraints);
    for _ in 0..n_constraints {
        let (ln, l) = next_line("constraint record")?;
        let vals: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| perr(ln, format!("invalid constraint index: {e}")))?;
        if vals.len() != 3 {
            return Err(perr(ln, "expected 'node parent0 parent1'".into()));
        }
        constraints.push(HangingConstraint {
            node: vals[0],
            parents: [vals[1], vals[2]],
            weights: [0.5, 0.5],
        });
    }

    let mut elements: Vec<Element> = corners
        .into_iter()
        .map(|vertices| Element {
            vertices,
            faces: Vec::new(),
        })
        .collect();
    for (i, f) in faces.iter().enumerate() {
        if f.owner >= elements.len() || f.neighbor.is_some_and(|n| n >= elements.len()) {
            return Err(MeshError::Validation(format!(
                "face {i} references a missing element"
            )));
        }
        elements[f.owner].faces.push(i);
        if let Some(nb) = f.neighbor {
            elements[nb].faces.push(i);
        }
    }
    let mut mesh = Mesh {
        nodes,
        elements,
        faces,
        constraints,
    };
    // normalize endpoint order to the owner's traversal direction
    for i in 0..mesh.faces.len() {
        let owner = mesh.faces[i].owner;
        let (ra, rb) = mesh.try_face_ref_endpoints(i, owner).ok_or_else(|| {
            MeshError::Validation(format!("face {i} does not lie on the boundary of its owner"))
        })?;
        if edge_dir(ra, rb) == Some(false) {
            mesh.faces[i].nodes.swap(0, 1);
            let (normal, measure) =
                face_geometry(&mesh.nodes, mesh.faces[i].nodes[0], mesh.faces[i].nodes[1]);
            mesh.faces[i].normal = normal;
            mesh.faces[i].measure = measure;
        }
    }
    mesh.validate()?;
    Ok(mesh)
}

/// Whether the reference segment ra -> rb follows the counter-clockwise
/// perimeter direction of the reference square.
fn edge_dir(ra: [f64; 2], rb: [f64; 2]) -> Option<bool> {
    let d = [rb[0] - ra[0], rb[1] - ra[1]];
    // bottom edge (eta = -1): ccw direction is +xi; right: +eta; top: -xi; left: -eta
    if (ra[1] + 1.0).abs() < 1e-9 && (rb[1] + 1.0).abs() < 1e-9 {
        return Some(d[0] > 0.0);
    }
    if (ra[0] - 1.0).abs() < 1e-9 && (rb[0] - 1.0).abs() < 1e-9 {
        return Some(d[1] > 0.0);
    }
    if (ra[1] - 1.0).abs() < 1e-9 && (rb[1] - 1.0).abs() < 1e-9 {
        return Some(d[0] < 0.0);
    }
    if (ra[0] + 1.0).abs() < 1e-9 && (rb[0] + 1.0).abs() < 1e-9 {
        return Some(d[1] < 0.0);
    }
    None
}
