//! Projection of an arbitrary face flux onto the locally conservative
//! subspace.
//!
//! The per-element conservation defect is measured by a residual field; a
//! piecewise-constant potential `y` then solves a graph-Laplacian-like
//! system whose couplings are the face measures scaled by the inverse
//! minimization weight. The corrected flux adds the weighted jump of `y`
//! across each free face:
//!
//!   V = U + w^{-1} (y_owner - y_neighbor)   (interior faces)
//!   V = U + w^{-1} y_owner                  (correctable boundary faces)
//!
//! Neumann faces always keep their prescribed flux. When the boundary flux
//! came from the recovery procedure it is exact in the variational sense
//! and is kept fixed as well; the correction system is then singular with
//! the constants as null space, and both the right hand side and the
//! potential are gauged to zero mean (only jumps of `y` enter the result).
//!
//! With uniform weights the correction is smallest in the plain L2 face
//! norm. With inverse-permeability weights, faces with a small effective
//! normal permeability receive proportionally small corrections, which
//! keeps nearly impermeable interfaces nearly impermeable.

use thiserror::Error;

use crate::fem;
use crate::flow::{FlowProblem, NodalField, PermeabilityField, TimeContext};
use crate::flux::{face_theta_ke, FaceField};
use crate::linalg::{self, LinalgError, SolverConfig, SparseMatrix};
use crate::mesh::{FaceMarker, Mesh};

#[derive(Debug, Error)]
pub enum PpError {
    #[error("correction system with an all-fixed boundary needs globally balanced data, but total source minus boundary outflow is {imbalance:.3e}")]
    Incompatible { imbalance: f64 },
    #[error(transparent)]
    Solver(#[from] LinalgError),
}

/// One scalar per element.
#[derive(Debug, Clone, PartialEq)]
pub struct CellField {
    pub values: Vec<f64>,
}

impl CellField {
    pub fn zeros(mesh: &Mesh) -> CellField {
        CellField {
            values: vec![0.0; mesh.elements.len()],
        }
    }

    /// Elementwise mean of a smooth function (its projection onto
    /// piecewise constants), via the 2x2 Gauss rule.
    pub fn project(mesh: &Mesh, f: impl Fn(f64, f64) -> f64) -> CellField {
        let values = (0..mesh.elements.len())
            .map(|e| {
                let corners = mesh.corner_coords(e);
                let mut sum = 0.0;
                for &(xi, eta, w) in &fem::gauss_2x2() {
                    let det = fem::det2(&fem::jacobian(&corners, xi, eta));
                    let p = fem::map_point(&corners, xi, eta);
                    sum += w * det * f(p[0], p[1]);
                }
                sum / mesh.area(e)
            })
            .collect();
        CellField { values }
    }

    /// Broken L2 norm: sqrt(sum of |E| v_E^2).
    pub fn norm(&self, mesh: &Mesh) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(e, v)| mesh.area(e) * v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Norm used for minimizing the correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScheme {
    /// Plain L2; every face weighted alike. The correction matrix is then
    /// independent of the permeability.
    Uniform,
    /// Weight each face by the inverse of its effective normal
    /// permeability, so low-permeability interfaces resist correction.
    InversePermeability,
}

/// Integrated source per element, the right side of the conservation
/// statement. For time-dependent runs the storage change is folded in.
#[derive(Debug, Clone)]
pub struct SourceSpec {
    /// Integral of the (effective) source over each element.
    pub integrated: Vec<f64>,
}

impl SourceSpec {
    pub fn from_values(integrated: Vec<f64>) -> SourceSpec {
        SourceSpec { integrated }
    }

    /// Integrate q(x, y, t) per element with the assembly quadrature, so
    /// conservation statements close exactly against the flow solve.
    pub fn from_fn(mesh: &Mesh, q: &dyn Fn(f64, f64, f64) -> f64, t: f64) -> SourceSpec {
        let integrated = (0..mesh.elements.len())
            .map(|e| {
                let corners = mesh.corner_coords(e);
                let mut sum = 0.0;
                for &(xi, eta, w) in &fem::gauss_2x2() {
                    let det = fem::det2(&fem::jacobian(&corners, xi, eta));
                    let p = fem::map_point(&corners, xi, eta);
                    sum += w * det * q(p[0], p[1], t);
                }
                sum
            })
            .collect();
        SourceSpec { integrated }
    }

    /// Effective source of one backward Euler step: the instantaneous
    /// source minus the storage change beta (p^n - p^{n-1}) / dt, using the
    /// same quadrature as the flow assembly.
    pub fn from_flow_step(
        mesh: &Mesh,
        problem: &FlowProblem,
        p_new: &NodalField,
        ctx: &TimeContext,
    ) -> SourceSpec {
        let mut spec = Self::from_fn(mesh, &problem.source, ctx.t);
        for e in 0..mesh.elements.len() {
            if problem.beta[e] == 0.0 {
                continue;
            }
            let corners = mesh.corner_coords(e);
            let now = p_new.on_element(mesh, e);
            let prev = ctx.p_prev.on_element(mesh, e);
            let mut change = 0.0;
            for &(xi, eta, w) in &fem::gauss_2x2() {
                let det = fem::det2(&fem::jacobian(&corners, xi, eta));
                let diff = fem::field_value(&now, xi, eta) - fem::field_value(&prev, xi, eta);
                change += w * det * diff;
            }
            spec.integrated[e] -= problem.beta[e] * change / ctx.dt;
        }
        spec
    }
}

/// Net outflow of a face field through each element boundary.
fn element_outflow(field: &FaceField, mesh: &Mesh) -> Vec<f64> {
    (0..mesh.elements.len())
        .map(|e| {
            mesh.elements[e]
                .faces
                .iter()
                .map(|&f| field.mean[f] * mesh.faces[f].measure * mesh.face_sign(f, e))
                .sum()
        })
        .collect()
}

/// Discrete divergence: per-element net outflow density.
pub fn discrete_divergence(field: &FaceField, mesh: &Mesh) -> CellField {
    let outflow = element_outflow(field, mesh);
    CellField {
        values: outflow
            .iter()
            .enumerate()
            .map(|(e, v)| v / mesh.area(e))
            .collect(),
    }
}

/// Conservation residual density: (source - net outflow) / area per element.
/// The flux is locally conservative exactly when this vanishes.
pub fn residual(field: &FaceField, source: &SourceSpec, mesh: &Mesh) -> CellField {
    let outflow = element_outflow(field, mesh);
    CellField {
        values: outflow
            .iter()
            .enumerate()
            .map(|(e, v)| (source.integrated[e] - v) / mesh.area(e))
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct ConservationReport {
    pub residual: CellField,
    /// Broken L2 norm of the residual density.
    pub norm: f64,
    /// |total source - total boundary outflow|.
    pub global_imbalance: f64,
    pub max_density: f64,
}

pub fn conservation_report(field: &FaceField, source: &SourceSpec, mesh: &Mesh) -> ConservationReport {
    let res = residual(field, source, mesh);
    let norm = res.norm(mesh);
    let max_density = res.max_abs();
    let global_imbalance = res
        .values
        .iter()
        .enumerate()
        .map(|(e, v)| v * mesh.area(e))
        .sum::<f64>()
        .abs();
    ConservationReport {
        residual: res,
        norm,
        global_imbalance,
        max_density,
    }
}

fn face_is_free(marker: FaceMarker, fix_dirichlet: bool) -> bool {
    match marker {
        FaceMarker::Interior => true,
        FaceMarker::Dirichlet => !fix_dirichlet,
        FaceMarker::Neumann => false,
    }
}

/// Assemble the correction system matrix: couplings -w^{-1}|F| across each
/// free interior face, diagonal sums over each element's free faces. Fixed
/// faces (Neumann, plus Dirichlet when `fix_dirichlet`) do not appear.
pub fn assemble_pp_matrix(
    mesh: &Mesh,
    weights: WeightScheme,
    permeability: &PermeabilityField,
    fix_dirichlet: bool,
) -> SparseMatrix {
    let n = mesh.elements.len();
    let mut triplets = Vec::new();
    for (f, face) in mesh.faces.iter().enumerate() {
        if !face_is_free(face.marker, fix_dirichlet) {
            continue;
        }
        let w_inv = match weights {
            WeightScheme::Uniform => 1.0,
            WeightScheme::InversePermeability => face_theta_ke(mesh, permeability, f).1,
        };
        let c = w_inv * face.measure;
        triplets.push((face.owner, face.owner, c));
        if let Some(nb) = face.neighbor {
            triplets.push((nb, nb, c));
            triplets.push((face.owner, nb, -c));
            triplets.push((nb, face.owner, -c));
        }
    }
    SparseMatrix::assemble(n, &triplets).expect("correction matrix indices are element indices")
}

/// Correction solver with a cached matrix; reusable across time steps as
/// long as the mesh and weights stay fixed.
pub struct CorrectionSolver {
    matrix: SparseMatrix,
    w_inv: Vec<f64>,
    free: Vec<bool>,
    /// No free boundary face: constants are in the null space.
    singular: bool,
    solver: SolverConfig,
}

impl CorrectionSolver {
    pub fn new(
        mesh: &Mesh,
        permeability: &PermeabilityField,
        weights: WeightScheme,
        fix_dirichlet: bool,
        solver: SolverConfig,
    ) -> CorrectionSolver {
        let matrix = assemble_pp_matrix(mesh, weights, permeability, fix_dirichlet);
        let free: Vec<bool> = mesh
            .faces
            .iter()
            .map(|f| face_is_free(f.marker, fix_dirichlet))
            .collect();
        let w_inv: Vec<f64> = (0..mesh.faces.len())
            .map(|f| match weights {
                WeightScheme::Uniform => 1.0,
                WeightScheme::InversePermeability => face_theta_ke(mesh, permeability, f).1,
            })
            .collect();
        let singular = !mesh
            .faces
            .iter()
            .zip(&free)
            .any(|(f, &is_free)| f.neighbor.is_none() && is_free);
        CorrectionSolver {
            matrix,
            w_inv,
            free,
            singular,
            solver,
        }
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn is_singular(&self) -> bool {
        self.singular
    }

    /// Solve for the correction potential given integrated element
    /// residuals. One iterative refinement pass keeps the per-element
    /// defect near machine precision.
    pub fn solve_potential(&self, residual_integrated: &[f64]) -> Result<CellField, PpError> {
        let n = residual_integrated.len();
        let mut rhs = residual_integrated.to_vec();
        if self.singular {
            let imbalance: f64 = rhs.iter().sum();
            let scale: f64 = rhs.iter().map(|v| v.abs()).sum();
            if imbalance.abs() > 1e-8 * scale.max(1.0) {
                return Err(PpError::Incompatible { imbalance });
            }
            let shift = imbalance / n as f64;
            for v in &mut rhs {
                *v -= shift;
            }
        }
        let (mut y, _) = linalg::cg_solve(&self.matrix, &rhs, &self.solver)?;
        // iterative refinement against the exact assembled residual
        let ay = self.matrix.matvec_alloc(&y);
        let mut defect: Vec<f64> = rhs.iter().zip(&ay).map(|(b, a)| b - a).collect();
        if self.singular {
            let shift = defect.iter().sum::<f64>() / n as f64;
            for v in &mut defect {
                *v -= shift;
            }
        }
        if linalg::norm(&defect) > 0.0 {
            if let Ok((dy, _)) = linalg::cg_solve(&self.matrix, &defect, &self.solver) {
                for i in 0..n {
                    y[i] += dy[i];
                }
            }
        }
        if self.singular {
            let mean = y.iter().sum::<f64>() / n as f64;
            for v in &mut y {
                *v -= mean;
            }
        }
        Ok(CellField { values: y })
    }

    /// Face correction field w^{-1} [y]; zero on fixed faces.
    pub fn correction_field(&self, y: &CellField, mesh: &Mesh) -> FaceField {
        let mut out = FaceField::zeros(mesh);
        for (f, face) in mesh.faces.iter().enumerate() {
            if !self.free[f] {
                continue;
            }
            let jump = match face.neighbor {
                Some(nb) => y.values[face.owner] - y.values[nb],
                None => y.values[face.owner],
            };
            let corr = self.w_inv[f] * jump;
            out.gauss[f] = [corr, corr];
            out.mean[f] = corr;
        }
        out
    }

    /// Minimal-norm face field whose discrete divergence equals `v`.
    pub fn apply_left_inverse(&self, v: &CellField, mesh: &Mesh) -> Result<FaceField, PpError> {
        let integrated: Vec<f64> = v
            .values
            .iter()
            .enumerate()
            .map(|(e, val)| val * mesh.area(e))
            .collect();
        let y = self.solve_potential(&integrated)?;
        Ok(self.correction_field(&y, mesh))
    }

    /// Project a flux onto the locally conservative subspace.
    pub fn postprocess(
        &self,
        field: &FaceField,
        source: &SourceSpec,
        mesh: &Mesh,
    ) -> Result<(FaceField, CellField, ConservationReport), PpError> {
        let outflow = element_outflow(field, mesh);
        let integrated: Vec<f64> = source
            .integrated
            .iter()
            .zip(&outflow)
            .map(|(s, o)| s - o)
            .collect();
        let y = self.solve_potential(&integrated)?;
        let mut corrected = field.clone();
        for (f, face) in mesh.faces.iter().enumerate() {
            if !self.free[f] {
                continue;
            }
            let jump = match face.neighbor {
                Some(nb) => y.values[face.owner] - y.values[nb],
                None => y.values[face.owner],
            };
            let corr = self.w_inv[f] * jump;
            corrected.gauss[f][0] += corr;
            corrected.gauss[f][1] += corr;
            corrected.mean[f] += corr;
        }
        let report = conservation_report(&corrected, source, mesh);
        Ok((corrected, y, report))
    }
}

/// One-shot projection; builds the correction solver internally.
pub fn postprocess_flux(
    field: &FaceField,
    source: &SourceSpec,
    mesh: &Mesh,
    permeability: &PermeabilityField,
    weights: WeightScheme,
    fix_dirichlet: bool,
    solver: SolverConfig,
) -> Result<(FaceField, CellField, ConservationReport), PpError> {
    CorrectionSolver::new(mesh, permeability, weights, fix_dirichlet, solver)
        .postprocess(field, source, mesh)
}
