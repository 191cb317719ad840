//! File emitters: legacy ASCII VTK with cell data, CSV tables, and the
//! face-flux / cell-source CSV formats shared with the command line.
//!
//! All numeric output is printed with 17 significant digits so identical
//! runs produce byte-identical files.

use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::flux::FaceField;
use crate::mesh::Mesh;
use crate::postprocess::{CellField, SourceSpec};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error in {file} at line {line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Mismatch(String),
}

/// 17 significant digits; round-trips f64 exactly.
pub fn fmt_full(x: f64) -> String {
    format!("{x:.16e}")
}

/// Legacy ASCII VTK unstructured grid with piecewise-constant cell data.
pub fn write_vtk(mesh: &Mesh, fields: &[(&str, &CellField)], path: &Path) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str("# vtk DataFile Version 3.0\n");
    out.push_str("lcflux cell data\n");
    out.push_str("ASCII\n");
    out.push_str("DATASET UNSTRUCTURED_GRID\n");
    out.push_str(&format!("POINTS {} double\n", mesh.nodes.len()));
    for p in &mesh.nodes {
        out.push_str(&format!("{} {} 0.0\n", fmt_full(p.x), fmt_full(p.y)));
    }
    let ne = mesh.elements.len();
    out.push_str(&format!("CELLS {} {}\n", ne, 5 * ne));
    for e in &mesh.elements {
        let v = e.vertices;
        out.push_str(&format!("4 {} {} {} {}\n", v[0], v[1], v[2], v[3]));
    }
    out.push_str(&format!("CELL_TYPES {ne}\n"));
    for _ in 0..ne {
        out.push_str("9\n");
    }
    if !fields.is_empty() {
        out.push_str(&format!("CELL_DATA {ne}\n"));
        for (name, field) in fields {
            if field.values.len() != ne {
                return Err(IoError::Mismatch(format!(
                    "field '{name}' has {} values for {ne} cells",
                    field.values.len()
                )));
            }
            out.push_str(&format!("SCALARS {name} double 1\n"));
            out.push_str("LOOKUP_TABLE default\n");
            for v in &field.values {
                out.push_str(&fmt_full(*v));
                out.push('\n');
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// CSV with a header row; every numeric cell carries full precision.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<(), IoError> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "{}", header.join(","))?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| fmt_full(*v)).collect();
        writeln!(file, "{}", line.join(","))?;
    }
    Ok(())
}

const FLUX_HEADER: &str = "face_id,x_mid,y_mid,nx,ny,measure,mean,g0,g1";

/// Face-flux dump: one row per face with midpoint, normal, measure, mean
/// and the two Gauss-point values.
pub fn write_flux_csv(field: &FaceField, mesh: &Mesh, path: &Path) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str(FLUX_HEADER);
    out.push('\n');
    for (f, face) in mesh.faces.iter().enumerate() {
        let mid = mesh.face_midpoint(f);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            f,
            fmt_full(mid[0]),
            fmt_full(mid[1]),
            fmt_full(face.normal[0]),
            fmt_full(face.normal[1]),
            fmt_full(face.measure),
            fmt_full(field.mean[f]),
            fmt_full(field.gauss[f][0]),
            fmt_full(field.gauss[f][1]),
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a face-flux dump back, checking it against the mesh face count and
/// geometry.
pub fn read_flux_csv(mesh: &Mesh, path: &Path) -> Result<FaceField, IoError> {
    let text = std::fs::read_to_string(path)?;
    let file = path.display().to_string();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == FLUX_HEADER => {}
        Some((i, h)) => {
            return Err(IoError::Parse {
                file,
                line: i + 1,
                message: format!("expected header '{FLUX_HEADER}', got '{h}'"),
            })
        }
        None => {
            return Err(IoError::Parse {
                file,
                line: 1,
                message: "empty flux file".into(),
            })
        }
    }
    let mut field = FaceField::zeros(mesh);
    let mut seen = 0usize;
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(IoError::Parse {
                file,
                line: i + 1,
                message: format!("expected 9 columns, got {}", cols.len()),
            });
        }
        let parse = |s: &str| -> Result<f64, IoError> {
            s.parse().map_err(|_| IoError::Parse {
                file: path.display().to_string(),
                line: i + 1,
                message: format!("invalid number '{s}'"),
            })
        };
        let id: usize = cols[0].parse().map_err(|_| IoError::Parse {
            file: path.display().to_string(),
            line: i + 1,
            message: format!("invalid face id '{}'", cols[0]),
        })?;
        if id >= mesh.faces.len() {
            return Err(IoError::Parse {
                file,
                line: i + 1,
                message: format!("face id {id} out of range for {} faces", mesh.faces.len()),
            });
        }
        let mid = mesh.face_midpoint(id);
        let tol = 1e-9 * mesh.max_diameter().max(1.0);
        if (parse(cols[1])? - mid[0]).abs() > tol || (parse(cols[2])? - mid[1]).abs() > tol {
            return Err(IoError::Parse {
                file,
                line: i + 1,
                message: format!("face {id} midpoint does not match the mesh"),
            });
        }
        field.mean[id] = parse(cols[6])?;
        field.gauss[id][0] = parse(cols[7])?;
        field.gauss[id][1] = parse(cols[8])?;
        seen += 1;
    }
    if seen != mesh.faces.len() {
        return Err(IoError::Mismatch(format!(
            "flux file covers {seen} of {} faces",
            mesh.faces.len()
        )));
    }
    Ok(field)
}

/// Per-element integrated source file: `element,value` rows.
pub fn write_source_csv(source: &SourceSpec, path: &Path) -> Result<(), IoError> {
    let mut out = String::from("element,integrated_source\n");
    for (e, v) in source.integrated.iter().enumerate() {
        out.push_str(&format!("{e},{}\n", fmt_full(*v)));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_source_csv(mesh: &Mesh, path: &Path) -> Result<SourceSpec, IoError> {
    let text = std::fs::read_to_string(path)?;
    let file = path.display().to_string();
    let mut integrated = vec![0.0; mesh.elements.len()];
    let mut seen = 0usize;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if i == 0 || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 2 {
            return Err(IoError::Parse {
                file,
                line: i + 1,
                message: "expected 'element,value'".into(),
            });
        }
        let e: usize = cols[0].parse().map_err(|_| IoError::Parse {
            file: path.display().to_string(),
            line: i + 1,
            message: format!("invalid element index '{}'", cols[0]),
        })?;
        if e >= integrated.len() {
            return Err(IoError::Parse {
                file,
                line: i + 1,
                message: format!("element {e} out of range"),
            });
        }
        integrated[e] = cols[1].parse().map_err(|_| IoError::Parse {
            file: path.display().to_string(),
            line: i + 1,
            message: format!("invalid number '{}'", cols[1]),
        })?;
        seen += 1;
    }
    if seen != integrated.len() {
        return Err(IoError::Mismatch(format!(
            "source file covers {seen} of {} elements",
            integrated.len()
        )));
    }
    Ok(SourceSpec::from_values(integrated))
}

/// Per-element scalar permeability file: `element,value` rows.
pub fn read_permeability_csv(mesh: &Mesh, path: &Path) -> Result<Vec<f64>, IoError> {
    let text = std::fs::read_to_string(path)?;
    let file = path.display().to_string();
    let mut values = vec![1.0; mesh.elements.len()];
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if i == 0 || line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 2 {
            return Err(IoError::Parse {
                file,
                line: i + 1,
                message: "expected 'element,value'".into(),
            });
        }
        let e: usize = cols[0].parse().map_err(|_| IoError::Parse {
            file: path.display().to_string(),
            line: i + 1,
            message: format!("invalid element index '{}'", cols[0]),
        })?;
        if e >= values.len() {
            return Err(IoError::Parse {
                file,
                line: i + 1,
                message: format!("element {e} out of range"),
            });
        }
        values[e] = cols[1].parse().map_err(|_| IoError::Parse {
            file: path.display().to_string(),
            line: i + 1,
            message: format!("invalid number '{}'", cols[1]),
        })?;
    }
    Ok(values)
}
