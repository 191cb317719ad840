//! Face-normal flux extraction from CG pressure solutions.
//!
//! On interior faces the two one-sided traces of -K grad(p_h) . n are
//! combined with either the arithmetic average or permeability-dependent
//! harmonic weights. On the Dirichlet boundary the flux depends on how the
//! boundary conditions were imposed: one-sided traces (strong), traces plus
//! the penalty correction (weak), or a variationally recovered boundary
//! flux (recovery). Neumann faces always carry the prescribed datum.

use thiserror::Error;

use crate::fem;
use crate::flow::{
    element_terms, DirichletMode, FlowError, FlowProblem, NodalField, PermeabilityField,
    TimeContext,
};
use crate::linalg::{self, SolverConfig, SparseMatrix};
use crate::mesh::{FaceMarker, Mesh};

#[derive(Debug, Error)]
pub enum FluxError {
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Solver(#[from] linalg::LinalgError),
}

/// One flux trace per face: the values at the two face Gauss points and the
/// face mean, all oriented along the face normal.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceField {
    pub gauss: Vec<[f64; 2]>,
    pub mean: Vec<f64>,
}

impl FaceField {
    pub fn zeros(mesh: &Mesh) -> FaceField {
        FaceField {
            gauss: vec![[0.0; 2]; mesh.faces.len()],
            mean: vec![0.0; mesh.faces.len()],
        }
    }

    /// Sample an exact flux function u.n(x, y, normal) at the face Gauss
    /// points; the mean is the two-point Gauss average.
    pub fn from_exact(mesh: &Mesh, flux: impl Fn(f64, f64, [f64; 2]) -> f64) -> FaceField {
        let mut field = FaceField::zeros(mesh);
        for (f, face) in mesh.faces.iter().enumerate() {
            let pts = mesh.face_gauss_points(f);
            for (g, pt) in pts.iter().enumerate() {
                field.gauss[f][g] = flux(pt[0], pt[1], face.normal);
            }
            field.mean[f] = 0.5 * (field.gauss[f][0] + field.gauss[f][1]);
        }
        field
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Weighting of the two one-sided traces on interior faces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AveragingScheme {
    /// Arithmetic average (weight 1/2).
    Central,
    /// Harmonic permeability weighting; the low-permeability side dominates.
    Harmonic,
}

/// Harmonic averaging data for a pair of normal permeabilities: the owner
/// weight `theta` and the effective normal permeability `k_e`. On boundary
/// faces the one-sided values degenerate to theta = 1, k_e = n.K.n.
pub fn effective_face_permeability(
    k_owner: [[f64; 2]; 2],
    k_neighbor: Option<[[f64; 2]; 2]>,
    normal: [f64; 2],
) -> (f64, f64) {
    let delta = |k: [[f64; 2]; 2]| {
        normal[0] * (k[0][0] * normal[0] + k[0][1] * normal[1])
            + normal[1] * (k[1][0] * normal[0] + k[1][1] * normal[1])
    };
    let d_own = delta(k_owner);
    assert!(d_own > 0.0, "normal permeability must be positive");
    match k_neighbor {
        None => (1.0, d_own),
        Some(k_nb) => {
            let d_nb = delta(k_nb);
            assert!(d_nb > 0.0, "normal permeability must be positive");
            (d_nb / (d_own + d_nb), 2.0 * d_own * d_nb / (d_own + d_nb))
        }
    }
}

/// Per-face (theta, k_e) for a mesh and permeability field.
pub fn face_theta_ke(mesh: &Mesh, permeability: &PermeabilityField, f: usize) -> (f64, f64) {
    let face = &mesh.faces[f];
    effective_face_permeability(
        permeability.tensor(face.owner),
        face.neighbor.map(|nb| permeability.tensor(nb)),
        face.normal,
    )
}

fn side_trace(
    mesh: &Mesh,
    p: &NodalField,
    permeability: &PermeabilityField,
    f: usize,
    e: usize,
) -> [f64; 2] {
    let corners = mesh.corner_coords(e);
    let nodal = p.on_element(mesh, e);
    let k = permeability.tensor(e);
    let normal = mesh.faces[f].normal;
    let (ra, rb) = mesh.face_ref_endpoints(f, e);
    let params = fem::face_gauss_params();
    let mut out = [0.0; 2];
    for (g, &s) in params.iter().enumerate() {
        let xi = ra[0] + s * (rb[0] - ra[0]);
        let eta = ra[1] + s * (rb[1] - ra[1]);
        let grad = fem::field_grad(&corners, &nodal, xi, eta);
        let kg = [
            k[0][0] * grad[0] + k[0][1] * grad[1],
            k[1][0] * grad[0] + k[1][1] * grad[1],
        ];
        out[g] = -(kg[0] * normal[0] + kg[1] * normal[1]);
    }
    out
}

/// Extract the face flux of a pressure solution. `mode` must match the mode
/// the pressure was solved with; `time` carries the backward Euler context
/// for time-dependent problems (recovery needs it, and weak-mode penalty
/// data is evaluated at the current time).
pub fn extract_flux(
    mesh: &Mesh,
    p: &NodalField,
    problem: &FlowProblem,
    mode: DirichletMode,
    avg: AveragingScheme,
    time: Option<&TimeContext>,
) -> Result<FaceField, FluxError> {
    let t = time.map(|c| c.t).unwrap_or(0.0);
    let recovered = if mode == DirichletMode::Recovery {
        Some(recover_dirichlet_flux(mesh, p, problem, time)?)
    } else {
        None
    };
    let mut field = FaceField::zeros(mesh);
    for (f, face) in mesh.faces.iter().enumerate() {
        let pts = mesh.face_gauss_points(f);
        let values: [f64; 2] = match face.marker {
            FaceMarker::Neumann => {
                [0, 1].map(|g| (problem.neumann_flux)(pts[g][0], pts[g][1], t))
            }
            FaceMarker::Interior => {
                let own = side_trace(mesh, p, &problem.permeability, f, face.owner);
                let nb = side_trace(mesh, p, &problem.permeability, f, face.neighbor.unwrap());
                let theta = match avg {
                    AveragingScheme::Central => 0.5,
                    AveragingScheme::Harmonic => {
                        face_theta_ke(mesh, &problem.permeability, f).0
                    }
                };
                [0, 1].map(|g| theta * own[g] + (1.0 - theta) * nb[g])
            }
            FaceMarker::Dirichlet => {
                let own = side_trace(mesh, p, &problem.permeability, f, face.owner);
                match mode {
                    DirichletMode::Strong => own,
                    DirichletMode::Weak => {
                        let nodal = p.on_element(mesh, face.owner);
                        let (ra, rb) = mesh.face_ref_endpoints(f, face.owner);
                        let params = fem::face_gauss_params();
                        let sigma = problem.penalty / face.measure;
                        let mut vals = own;
                        for (g, &s) in params.iter().enumerate() {
                            let xi = ra[0] + s * (rb[0] - ra[0]);
                            let eta = ra[1] + s * (rb[1] - ra[1]);
                            let ph = fem::field_value(&nodal, xi, eta);
                            let pb = (problem.dirichlet_value)(pts[g][0], pts[g][1], t);
                            vals[g] += sigma * (ph - pb);
                        }
                        vals
                    }
                    DirichletMode::Recovery => {
                        let rec = recovered.as_ref().unwrap();
                        let [a, b] = face.nodes;
                        let params = fem::face_gauss_params();
                        [0, 1].map(|g| {
                            rec[a] + params[g] * (rec[b] - rec[a])
                        })
                    }
                }
            }
        };
        field.gauss[f] = values;
        field.mean[f] = 0.5 * (values[0] + values[1]);
    }
    Ok(field)
}

/// Recover the boundary flux on the Dirichlet part variationally: the
/// boundary mass matrix is solved against the residual of the interior
/// scheme tested with the boundary nodes' basis functions. The result is a
/// nodal trace (zero away from the Dirichlet boundary) whose face
/// restriction is globally conservative.
pub fn recover_dirichlet_flux(
    mesh: &Mesh,
    p: &NodalField,
    problem: &FlowProblem,
    time: Option<&TimeContext>,
) -> Result<Vec<f64>, FluxError> {
    let dirichlet = mesh.dirichlet_nodes();
    if dirichlet.is_empty() {
        return Err(FluxError::InvalidArgument(
            "flux recovery needs a non-empty Dirichlet boundary".into(),
        ));
    }
    let t = time.map(|c| c.t).unwrap_or(0.0);
    let n = mesh.nodes.len();

    // residual of the scheme with unconstrained test functions:
    // a(p_h, phi_i) + time term - l(phi_i)
    let mut residual = vec![0.0; n];
    for e in 0..mesh.elements.len() {
        let with_mass = time.is_some() && problem.beta[e] != 0.0;
        let terms = element_terms(mesh, e, problem, t, with_mass);
        let nodal = p.on_element(mesh, e);
        let verts = mesh.elements[e].vertices;
        for i in 0..4 {
            let mut r = -terms.rhs[i];
            for j in 0..4 {
                r += terms.stiffness[i][j] * nodal[j];
            }
            if with_mass {
                let ctx = time.unwrap();
                let prev = ctx.p_prev.on_element(mesh, e);
                for j in 0..4 {
                    r += terms.mass[i][j] * (nodal[j] - prev[j]) / ctx.dt;
                }
            }
            residual[verts[i]] += r;
        }
    }
    for (fi, face) in mesh.faces.iter().enumerate() {
        if face.marker != FaceMarker::Neumann {
            continue;
        }
        let e = face.owner;
        let verts = mesh.elements[e].vertices;
        let (ra, rb) = mesh.face_ref_endpoints(fi, e);
        let pts = mesh.face_gauss_points(fi);
        let w_face = face.measure / 2.0;
        for (g, &s) in fem::face_gauss_params().iter().enumerate() {
            let xi = ra[0] + s * (rb[0] - ra[0]);
            let eta = ra[1] + s * (rb[1] - ra[1]);
            let shapes = fem::shape(xi, eta);
            let ub = (problem.neumann_flux)(pts[g][0], pts[g][1], t);
            for i in 0..4 {
                residual[verts[i]] += w_face * ub * shapes[i];
            }
        }
    }
    // condense hanging test functions onto their parents
    for c in &mesh.constraints {
        let r = residual[c.node];
        residual[c.parents[0]] += c.weights[0] * r;
        residual[c.parents[1]] += c.weights[1] * r;
        residual[c.node] = 0.0;
    }

    // boundary mass matrix over the Dirichlet faces (linear traces)
    let index: std::collections::HashMap<usize, usize> = dirichlet
        .iter()
        .enumerate()
        .map(|(k, &node)| (node, k))
        .collect();
    let mut triplets = Vec::new();
    for face in &mesh.faces {
        if face.marker != FaceMarker::Dirichlet {
            continue;
        }
        let [a, b] = face.nodes;
        let (ia, ib) = (index[&a], index[&b]);
        let l = face.measure;
        triplets.push((ia, ia, l / 3.0));
        triplets.push((ib, ib, l / 3.0));
        triplets.push((ia, ib, l / 6.0));
        triplets.push((ib, ia, l / 6.0));
    }
    let mass = SparseMatrix::assemble(dirichlet.len(), &triplets)?;
    let rhs: Vec<f64> = dirichlet.iter().map(|&node| -residual[node]).collect();
    let cfg = SolverConfig {
        tolerance: 1e-13,
        max_iterations: 10_000,
        preconditioner: linalg::Preconditioner::Jacobi,
    };
    let (sol, _) = linalg::cg_solve(&mass, &rhs, &cfg)?;
    let mut out = vec![0.0; n];
    for (k, &node) in dirichlet.iter().enumerate() {
        out[node] = sol[k];
    }
    Ok(out)
}

/// Which face norm to evaluate: plain L2 over the skeleton or the
/// h-weighted variant (each face integral scaled by the mesh parameter).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FaceNorm {
    Plain,
    HWeighted(f64),
}

/// Norm of the difference between a face field and an exact flux. Traces
/// are linear along each straight face, so the stored pair of Gauss values
/// determines the field everywhere on the face; the squared difference
/// against the (smooth) exact flux is integrated with a 3-point rule.
pub fn face_norm_error(
    field: &FaceField,
    mesh: &Mesh,
    exact: &dyn Fn(f64, f64, [f64; 2]) -> f64,
    norm: FaceNorm,
) -> f64 {
    let weight = match norm {
        FaceNorm::Plain => 1.0,
        FaceNorm::HWeighted(h) => h,
    };
    let [s0, s1] = fem::face_gauss_params();
    let gauss3: [(f64, f64); 3] = {
        let g = 0.774_596_669_241_483_4;
        let w0 = 8.0 / 9.0;
        let w1 = 5.0 / 9.0;
        [
            (0.5 * (1.0 - g), w1 / 2.0),
            (0.5, w0 / 2.0),
            (0.5 * (1.0 + g), w1 / 2.0),
        ]
    };
    let mut total = 0.0;
    for (f, face) in mesh.faces.iter().enumerate() {
        let [a, b] = face.nodes;
        let (pa, pb) = (mesh.nodes[a], mesh.nodes[b]);
        let [g0, g1] = field.gauss[f];
        for &(s, w) in &gauss3 {
            let value = g0 + (g1 - g0) * (s - s0) / (s1 - s0);
            let x = pa.x + s * (pb.x - pa.x);
            let y = pa.y + s * (pb.y - pa.y);
            let diff = value - exact(x, y, face.normal);
            total += weight * face.measure * w * diff * diff;
        }
    }
    total.sqrt()
}

/// Integrate the x-directed flow through the set of faces lying on the
/// vertical line x = `x_line`. The faces must tile the full height of the
/// mesh; positive result means net flow in +x.
pub fn integrate_flux_on_line(
    field: &FaceField,
    mesh: &Mesh,
    x_line: f64,
) -> Result<f64, FluxError> {
    let scale = mesh.max_diameter();
    let tol = 1e-9 * scale.max(1.0);
    let mut spans: Vec<(f64, f64)> = Vec::new();
    let mut total = 0.0;
    for (f, face) in mesh.faces.iter().enumerate() {
        let [a, b] = face.nodes;
        let (pa, pb) = (mesh.nodes[a], mesh.nodes[b]);
        if (pa.x - x_line).abs() > tol || (pb.x - x_line).abs() > tol {
            continue;
        }
        let sign = if face.normal[0] >= 0.0 { 1.0 } else { -1.0 };
        total += sign * field.mean[f] * face.measure;
        spans.push((pa.y.min(pb.y), pa.y.max(pb.y)));
    }
    if spans.is_empty() {
        return Err(FluxError::InvalidArgument(format!(
            "no mesh faces lie on the line x = {x_line}"
        )));
    }
    spans.sort_by(|a, b| a.0.total_cmp(&b.0));
    let y_min = mesh.nodes.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let y_max = mesh
        .nodes
        .iter()
        .map(|p| p.y)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut cursor = y_min;
    for (lo, hi) in spans {
        if (lo - cursor).abs() > tol {
            return Err(FluxError::InvalidArgument(format!(
                "faces on x = {x_line} do not tile the mesh height (gap or overlap at y = {cursor})"
            )));
        }
        cursor = hi;
    }
    if (cursor - y_max).abs() > tol {
        return Err(FluxError::InvalidArgument(format!(
            "faces on x = {x_line} stop at y = {cursor} before the top of the mesh"
        )));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{solve_stationary, FlowProblem};
    use crate::mesh::{build_cartesian, distort, refine_cells, Rect, SideMarkers};

    fn one_dim_problem(mesh: &Mesh) -> FlowProblem {
        let mut p = FlowProblem::new(mesh, PermeabilityField::isotropic(mesh, 1.0).unwrap());
        p.source = Box::new(|_, _, _| 2.0);
        p.dirichlet_value = Box::new(|x, _, _| if x < 0.5 { 1.0 } else { 0.0 });
        p
    }

    fn exact_flux(x: f64, _y: f64, n: [f64; 2]) -> f64 {
        // u = (2x, 0) for p = 1 - x^2
        2.0 * x * n[0]
    }

    #[test]
    fn harmonic_weights_match_closed_forms() {
        let iso = |k: f64| [[k, 0.0], [0.0, k]];
        let n = [1.0, 0.0];
        let (theta, ke) = effective_face_permeability(iso(3.0), Some(iso(3.0)), n);
        assert!((theta - 0.5).abs() < 1e-15);
        assert!((ke - 3.0).abs() < 1e-15);
        let (theta, ke) = effective_face_permeability(iso(1.0), Some(iso(3.0)), n);
        assert!((theta - 0.75).abs() < 1e-15);
        assert!((ke - 1.5).abs() < 1e-15);
        let (theta, ke) = effective_face_permeability(iso(1.0), Some(iso(1e-3)), n);
        assert!((theta - 1e-3 / 1.001).abs() < 1e-12);
        assert!((ke - 2e-3 / 1.001).abs() < 1e-12);
        let (theta, ke) = effective_face_permeability(iso(2.0), None, n);
        assert_eq!(theta, 1.0);
        assert!((ke - 2.0).abs() < 1e-15);
    }

    #[test]
    fn strip_flux_matches_hand_values() {
        let mesh = build_cartesian(4, 1, Rect::unit(), SideMarkers::flow_in_x()).unwrap();
        let problem = one_dim_problem(&mesh);
        let p = solve_stationary(&mesh, &problem, DirichletMode::Strong, &SolverConfig::strict())
            .unwrap();
        let flux = extract_flux(
            &mesh,
            &p,
            &problem,
            DirichletMode::Strong,
            AveragingScheme::Central,
            None,
        )
        .unwrap();
        for (f, face) in mesh.faces.iter().enumerate() {
            let mid = mesh.face_midpoint(f);
            match face.marker {
                FaceMarker::Interior => {
                    // interior averages are exact for the nodally exact solution
                    assert!(
                        (flux.mean[f] - 2.0 * mid[0]).abs() < 1e-11,
                        "interior face at x = {}",
                        mid[0]
                    );
                }
                FaceMarker::Neumann => assert_eq!(flux.mean[f], 0.0),
                FaceMarker::Dirichlet => {
                    let expected = if mid[0] < 0.5 { -0.25 } else { 1.75 };
                    assert!((flux.mean[f] - expected).abs() < 1e-11);
                }
            }
        }
        let err = face_norm_error(&flux, &mesh, &exact_flux, FaceNorm::Plain);
        assert!((err - 0.125f64.sqrt()).abs() < 1e-9, "err = {err}");
    }

    #[test]
    fn constant_pressure_yields_zero_interior_flux() {
        let base = build_cartesian(3, 3, Rect::unit(), SideMarkers::flow_in_x()).unwrap();
        let mesh = distort(&refine_cells(&base, &[0, 5]).unwrap(), 0.2, 21).unwrap();
        let problem = one_dim_problem(&mesh);
        let p = NodalField::from_fn(&mesh, |_, _| 7.0);
        for avg in [AveragingScheme::Central, AveragingScheme::Harmonic] {
            let flux =
                extract_flux(&mesh, &p, &problem, DirichletMode::Strong, avg, None).unwrap();
            for (f, face) in mesh.faces.iter().enumerate() {
                if face.marker == FaceMarker::Interior {
                    assert!(flux.mean[f].abs() < 1e-14);
                    assert!(flux.gauss[f][0].abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn averaging_schemes_agree_for_uniform_permeability() {
        let base = build_cartesian(3, 2, Rect::unit(), SideMarkers::flow_in_x()).unwrap();
        let mesh = distort(&base, 0.15, 2).unwrap();
        let problem = one_dim_problem(&mesh);
        let p = solve_stationary(&mesh, &problem, DirichletMode::Strong, &SolverConfig::strict())
            .unwrap();
        let a = extract_flux(
            &mesh,
            &p,
            &problem,
            DirichletMode::Strong,
            AveragingScheme::Central,
            None,
        )
        .unwrap();
        let b = extract_flux(
            &mesh,
            &p,
            &problem,
            DirichletMode::Strong,
            AveragingScheme::Harmonic,
            None,
        )
        .unwrap();
        for f in 0..a.len() {
            assert!((a.mean[f] - b.mean[f]).abs() < 1e-12);
        }
    }

    #[test]
    fn recovered_flux_is_exact_on_strip_grids() {
        for xs in [
            vec![0.0, 0.25, 0.5, 0.75, 1.0],
            vec![0.0, 0.1, 0.3, 0.6, 1.0],
        ] {
            let mesh =
                crate::mesh::build_tensor(&xs, &[0.0, 1.0], SideMarkers::flow_in_x()).unwrap();
            let problem = one_dim_problem(&mesh);
            let p = solve_stationary(
                &mesh,
                &problem,
                DirichletMode::Strong,
                &SolverConfig::strict(),
            )
            .unwrap();
            let flux = extract_flux(
                &mesh,
                &p,
                &problem,
                DirichletMode::Recovery,
                AveragingScheme::Central,
                None,
            )
            .unwrap();
            for (f, face) in mesh.faces.iter().enumerate() {
                if face.marker == FaceMarker::Dirichlet {
                    let mid = mesh.face_midpoint(f);
                    let expected = if mid[0] < 0.5 { 0.0 } else { 2.0 };
                    assert!(
                        (flux.mean[f] - expected).abs() < 1e-11,
                        "recovered flux {} at x = {}",
                        flux.mean[f],
                        mid[0]
                    );
                }
            }
        }
    }

    #[test]
    fn recovery_requires_a_dirichlet_boundary() {
        let mesh = build_cartesian(2, 2, Rect::unit(), SideMarkers::all_neumann()).unwrap();
        let problem = FlowProblem::new(&mesh, PermeabilityField::isotropic(&mesh, 1.0).unwrap());
        let p = NodalField::zeros(&mesh);
        assert!(matches!(
            recover_dirichlet_flux(&mesh, &p, &problem, None),
            Err(FluxError::InvalidArgument(_))
        ));
    }

    #[test]
    fn exact_trace_has_zero_face_norm_error() {
        let base = build_cartesian(3, 3, Rect::unit(), SideMarkers::flow_in_x()).unwrap();
        let mesh = distort(&base, 0.1, 5).unwrap();
        let field = FaceField::from_exact(&mesh, exact_flux);
        assert!(face_norm_error(&field, &mesh, &exact_flux, FaceNorm::Plain) < 1e-14);
        assert!(
            face_norm_error(&field, &mesh, &exact_flux, FaceNorm::HWeighted(0.25)) < 1e-14
        );
    }

    #[test]
    fn line_integrals_of_the_exact_flux() {
        let mesh = build_cartesian(4, 4, Rect::unit(), SideMarkers::flow_in_x()).unwrap();
        let field = FaceField::from_exact(&mesh, exact_flux);
        let at_one = integrate_flux_on_line(&field, &mesh, 1.0).unwrap();
        assert!((at_one - 2.0).abs() < 1e-12);
        let at_zero = integrate_flux_on_line(&field, &mesh, 0.0).unwrap();
        assert!(at_zero.abs() < 1e-12);
        let zero = FaceField::zeros(&mesh);
        assert_eq!(integrate_flux_on_line(&zero, &mesh, 0.5).unwrap(), 0.0);
        assert!(integrate_flux_on_line(&field, &mesh, 0.1).is_err());
    }

    #[test]
    fn line_integral_spans_hanging_subfaces() {
        let base = build_cartesian(2, 2, Rect::unit(), SideMarkers::flow_in_x()).unwrap();
        let mesh = refine_cells(&base, &[1, 3]).unwrap();
        let field = FaceField::from_exact(&mesh, exact_flux);
        let mid = integrate_flux_on_line(&field, &mesh, 0.5).unwrap();
        assert!((mid - 1.0).abs() < 1e-12);
    }
}
