//! Locally conservative flux postprocessing for Darcy flow and transport.
//!
//! This crate solves the pressure equation with continuous bilinear (Q1)
//! finite elements on 2D quadrilateral meshes, extracts face-normal fluxes
//! from the pressure solution, projects those fluxes onto the locally
//! conservative subspace by a minimal piecewise-constant correction, and
//! drives an implicit upwind DG(0) transport solver with the result.
//!
//! Module map:
//! - [`mesh`]: quadrilateral meshes with oriented faces, local refinement
//!   with hanging nodes, distortion, and a plain-text file format
//! - [`linalg`]: CSR sparse matrices, CG (optionally SSOR-preconditioned)
//!   and BiCGStab solvers
//! - [`flow`]: CG(Q1) discretization of the pressure equation with strong
//!   or weak (penalty) Dirichlet conditions, stationary or backward Euler
//! - [`flux`]: face flux extraction (central/harmonic averaging), Dirichlet
//!   boundary flux recovery, face norms and line integrals
//! - [`postprocess`]: conservation residual, the weighted minimal correction,
//!   and the conservative projected flux
//! - [`transport`]: implicit upwind DG(0) advection with overshoot and
//!   production-rate diagnostics
//! - [`harness`]: the experiment catalog (consistency, convergence, barrier,
//!   channel, well pair) and rate computation
//! - [`io`]: VTK legacy / CSV emitters
//! - [`cli`]: the `lcflux` command-line front end

pub mod cli;
pub mod fem;
pub mod flow;
pub mod flux;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod mesh;
pub mod postprocess;
pub mod transport;
