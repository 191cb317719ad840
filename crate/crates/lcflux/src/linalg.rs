//! Row-compressed sparse matrices and iterative solvers.
//!
//! The flow and correction systems are symmetric positive (semi-)definite
//! and are solved with conjugate gradients, optionally preconditioned with
//! SSOR. The implicit transport system is nonsymmetric and is solved with
//! BiCGStab and a Jacobi preconditioner. All solvers are single-threaded
//! and deterministic for identical inputs.

use std::io::Write;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("triplet index ({row}, {col}) out of range for dimension {n}")]
    IndexOutOfRange { row: usize, col: usize, n: usize },
    #[error("{method} did not converge within {iterations} iterations (relative residual {residual:.3e})")]
    NoConvergence {
        method: &'static str,
        iterations: usize,
        residual: f64,
    },
    #[error("zero diagonal entry in row {row}")]
    ZeroDiagonal { row: usize },
    #[error("solver breakdown: {0}")]
    Breakdown(&'static str),
}

/// Square sparse matrix in compressed-row storage. Column indices are
/// sorted and unique within each row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    /// Assemble from (row, col, value) triplets; duplicates are summed.
    pub fn assemble(
        n: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<SparseMatrix, LinalgError> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(r, c, v) in triplets {
            if r >= n || c >= n {
                return Err(LinalgError::IndexOutOfRange { row: r, col: c, n });
            }
            rows[r].push((c, v));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in &mut rows {
            row.sort_by_key(|&(c, _)| c);
            let mut k = 0;
            while k < row.len() {
                let c = row[k].0;
                let mut v = 0.0;
                while k < row.len() && row[k].0 == c {
                    v += row[k].1;
                    k += 1;
                }
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Ok(SparseMatrix {
            n,
            row_ptr,
            cols,
            vals,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let lo = self.row_ptr[i];
        let hi = self.row_ptr[i + 1];
        (&self.cols[lo..hi], &self.vals[lo..hi])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            let mut s = 0.0;
            for (c, v) in cols.iter().zip(vals) {
                s += v * x[*c];
            }
            y[i] = s;
        }
    }

    pub fn matvec_alloc(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.vals.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest |A_ij - A_ji| over the whole matrix.
    pub fn symmetry_defect(&self) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (c, v) in cols.iter().zip(vals) {
                d = d.max((v - self.get(*c, i)).abs());
            }
        }
        d
    }

    /// Dump in MatrixMarket coordinate format for offline inspection.
    pub fn write_matrix_market(&self, w: &mut dyn Write) -> std::io::Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", self.n, self.n, self.nnz())?;
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (c, v) in cols.iter().zip(vals) {
                writeln!(w, "{} {} {:.16e}", i + 1, c + 1, v)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Preconditioner {
    None,
    /// Diagonal scaling.
    Jacobi,
    /// Symmetric successive overrelaxation with the given relaxation factor.
    Ssor(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    /// Relative residual stopping criterion, |r| <= tolerance * |b|.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub preconditioner: Preconditioner,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tolerance: 1e-10,
            max_iterations: 20_000,
            preconditioner: Preconditioner::None,
        }
    }
}

impl SolverConfig {
    /// Tight tolerance used for consistency and postprocessing runs.
    pub fn strict() -> Self {
        SolverConfig {
            tolerance: 1e-12,
            max_iterations: 50_000,
            preconditioner: Preconditioner::Ssor(1.5),
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// One application of the SSOR preconditioner,
/// z = M^{-1} r with M = (D/w + L) (w/(2-w)) D^{-1} (D/w + U).
pub fn ssor_apply(a: &SparseMatrix, relaxation: f64, r: &[f64]) -> Result<Vec<f64>, LinalgError> {
    let diag = a.diagonal();
    for (i, d) in diag.iter().enumerate() {
        if *d == 0.0 {
            return Err(LinalgError::ZeroDiagonal { row: i });
        }
    }
    Ok(ssor_apply_with_diag(a, relaxation, &diag, r))
}

fn ssor_apply_with_diag(a: &SparseMatrix, w: f64, diag: &[f64], r: &[f64]) -> Vec<f64> {
    let n = a.n();
    // forward sweep: (D/w + L) v = r
    let mut v = vec![0.0; n];
    for i in 0..n {
        let (cols, vals) = a.row(i);
        let mut s = r[i];
        for (c, val) in cols.iter().zip(vals) {
            if *c < i {
                s -= val * v[*c];
            }
        }
        v[i] = s * w / diag[i];
    }
    // diagonal scaling by D (2-w)/w
    for i in 0..n {
        v[i] *= diag[i] * (2.0 - w) / w;
    }
    // backward sweep: (D/w + U) z = v
    let mut z = vec![0.0; n];
    for i in (0..n).rev() {
        let (cols, vals) = a.row(i);
        let mut s = v[i];
        for (c, val) in cols.iter().zip(vals) {
            if *c > i {
                s -= val * z[*c];
            }
        }
        z[i] = s * w / diag[i];
    }
    z
}

enum Precond {
    Identity,
    Jacobi(Vec<f64>),
    Ssor { w: f64, diag: Vec<f64> },
}

impl Precond {
    fn build(a: &SparseMatrix, p: Preconditioner) -> Result<Precond, LinalgError> {
        match p {
            Preconditioner::None => Ok(Precond::Identity),
            Preconditioner::Jacobi | Preconditioner::Ssor(_) => {
                let diag = a.diagonal();
                for (i, d) in diag.iter().enumerate() {
                    if *d == 0.0 {
                        return Err(LinalgError::ZeroDiagonal { row: i });
                    }
                }
                match p {
                    Preconditioner::Jacobi => Ok(Precond::Jacobi(diag)),
                    Preconditioner::Ssor(w) => Ok(Precond::Ssor { w, diag }),
                    Preconditioner::None => unreachable!(),
                }
            }
        }
    }

    fn apply(&self, a: &SparseMatrix, r: &[f64]) -> Vec<f64> {
        match self {
            Precond::Identity => r.to_vec(),
            Precond::Jacobi(diag) => r.iter().zip(diag).map(|(x, d)| x / d).collect(),
            Precond::Ssor { w, diag } => ssor_apply_with_diag(a, *w, diag, r),
        }
    }
}

/// Preconditioned conjugate gradients for symmetric positive
/// (semi-)definite systems. For a singular pure-Neumann system the right
/// hand side must lie in the range of the matrix.
pub fn cg_solve(
    a: &SparseMatrix,
    b: &[f64],
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, usize), LinalgError> {
    cg_solve_traced(a, b, cfg, &mut |_| {})
}

/// Same as [`cg_solve`] but reports every iterate; used by tests that check
/// the energy-norm decay of the error.
pub fn cg_solve_traced(
    a: &SparseMatrix,
    b: &[f64],
    cfg: &SolverConfig,
    on_iterate: &mut dyn FnMut(&[f64]),
) -> Result<(Vec<f64>, usize), LinalgError> {
    let n = a.n();
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok((vec![0.0; n], 0));
    }
    let pc = Precond::build(a, cfg.preconditioner)?;
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = pc.apply(a, &r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut q = vec![0.0; n];
    for it in 0..cfg.max_iterations {
        a.matvec(&p, &mut q);
        let pq = dot(&p, &q);
        if pq <= 0.0 {
            return Err(LinalgError::Breakdown("matrix is not positive definite"));
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        on_iterate(&x);
        if norm(&r) <= cfg.tolerance * b_norm {
            return Ok((x, it + 1));
        }
        z = pc.apply(a, &r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(LinalgError::NoConvergence {
        method: "cg",
        iterations: cfg.max_iterations,
        residual: norm(&r) / b_norm,
    })
}

/// Preconditioned BiCGStab for nonsymmetric systems.
pub fn bicgstab_solve(
    a: &SparseMatrix,
    b: &[f64],
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, usize), LinalgError> {
    let n = a.n();
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return Ok((vec![0.0; n], 0));
    }
    let pc = Precond::build(a, cfg.preconditioner)?;
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut r_hat = r.clone();
    let mut rho = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut fresh = true;
    for it in 0..cfg.max_iterations {
        let r_norm = norm(&r);
        if r_norm <= cfg.tolerance * b_norm {
            return Ok((x, it));
        }
        let mut rho_new = dot(&r_hat, &r);
        if rho_new.abs() < 1e-12 * r_norm * norm(&r_hat) {
            if fresh {
                return Err(LinalgError::Breakdown("rho vanished in bicgstab"));
            }
            // stagnating shadow residual: restart with the current residual
            r_hat = r.clone();
            p = vec![0.0; n];
            v = vec![0.0; n];
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            rho_new = dot(&r_hat, &r);
            fresh = true;
        } else {
            fresh = false;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let p_hat = pc.apply(a, &p);
        a.matvec(&p_hat, &mut v);
        let denom = dot(&r_hat, &v);
        if denom.abs() < 1e-300 {
            return Err(LinalgError::Breakdown("stagnation in bicgstab"));
        }
        alpha = rho / denom;
        let s: Vec<f64> = (0..n).map(|i| r[i] - alpha * v[i]).collect();
        if norm(&s) <= cfg.tolerance * b_norm {
            for i in 0..n {
                x[i] += alpha * p_hat[i];
            }
            return Ok((x, it + 1));
        }
        let s_hat = pc.apply(a, &s);
        let t = a.matvec_alloc(&s_hat);
        let tt = dot(&t, &t);
        if tt == 0.0 {
            return Err(LinalgError::Breakdown("zero direction in bicgstab"));
        }
        omega = dot(&t, &s) / tt;
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
            r[i] = s[i] - omega * t[i];
        }
        if norm(&r) <= cfg.tolerance * b_norm {
            return Ok((x, it + 1));
        }
        if omega.abs() < 1e-300 {
            return Err(LinalgError::Breakdown("omega vanished in bicgstab"));
        }
    }
    Err(LinalgError::NoConvergence {
        method: "bicgstab",
        iterations: cfg.max_iterations,
        residual: norm(&r) / b_norm,
    })
}

/// Dense Gaussian elimination with partial pivoting. Reference solver for
/// tests and small fallback systems; independent of the iterative paths.
pub mod dense {
    use super::SparseMatrix;

    pub fn from_sparse(a: &SparseMatrix) -> Vec<Vec<f64>> {
        let n = a.n();
        let mut m = vec![vec![0.0; n]; n];
        for i in 0..n {
            let (cols, vals) = a.row(i);
            for (c, v) in cols.iter().zip(vals) {
                m[i][*c] = *v;
            }
        }
        m
    }

    /// Solve a dense system; returns None for a (numerically) singular matrix.
    pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
        let n = b.len();
        for k in 0..n {
            let piv = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))?;
            if a[piv][k].abs() < 1e-300 {
                return None;
            }
            a.swap(k, piv);
            b.swap(k, piv);
            for i in k + 1..n {
                let f = a[i][k] / a[k][k];
                if f == 0.0 {
                    continue;
                }
                for j in k..n {
                    a[i][j] -= f * a[k][j];
                }
                b[i] -= f * b[k];
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = b[i];
            for j in i + 1..n {
                s -= a[i][j] * x[j];
            }
            x[i] = s / a[i][i];
        }
        Some(x)
    }
}
