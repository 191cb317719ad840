//! Command-line front end.
//!
//! Subcommands:
//! - `consistency --grid <id> --alpha {sd|wd|rd}`: one stationary pipeline
//!   run, printing residual and flux-error norms as a CSV row
//! - `converge --case {smooth|distorted} --levels N --alpha {sd|rd}`: the
//!   manufactured-solution refinement study with rate columns
//! - `run --config <file>`: a barrier / channel / well-pair scenario driven
//!   by an INI-style configuration
//! - `postprocess --mesh <m> --flux <csv> --source <csv>`: standalone
//!   projection of a dumped flux onto the conservative subspace
//!
//! Exit codes: 0 on success, 1 on numerical failure (solver breakdown or
//! incompatible data), 2 on configuration errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::flow::{DirichletMode, PermeabilityField};
use crate::flux::AveragingScheme;
use crate::harness::{
    self, ConsistencyGrid, ConvergenceCase, ConvergenceTable, HarnessError, ScenarioKind,
    ScenarioSpec,
};
use crate::io;
use crate::linalg::SolverConfig;
use crate::mesh;
use crate::postprocess::{self, WeightScheme};

#[derive(Parser)]
#[command(name = "lcflux", version, about = "Darcy flow, conservative flux postprocessing and advective transport on 2D quad meshes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stationary consistency study on one of the catalog grids.
    Consistency {
        /// uniform1d | nonuniform1d | uniform2d | distorted | nonmatching
        #[arg(long)]
        grid: String,
        /// sd | wd | rd
        #[arg(long)]
        alpha: String,
        /// Weak-mode penalty coefficient.
        #[arg(long, default_value_t = 10.0)]
        sigma: f64,
        /// Directory for CSV output (stdout only when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Manufactured-solution convergence study.
    Converge {
        /// smooth | distorted
        #[arg(long)]
        case: String,
        #[arg(long, default_value_t = 4)]
        levels: usize,
        /// sd | wd | rd
        #[arg(long, default_value = "sd")]
        alpha: String,
        /// Levels on which the transport solver runs (defaults to all).
        #[arg(long)]
        transport_levels: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Transport scenario from a configuration file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Project a dumped flux onto the locally conservative subspace.
    Postprocess {
        /// Mesh in the plain-text mesh format.
        #[arg(long)]
        mesh: PathBuf,
        /// Face flux CSV (as written by the other subcommands).
        #[arg(long)]
        flux: PathBuf,
        /// Per-element integrated source CSV.
        #[arg(long)]
        source: PathBuf,
        /// l2 | wl2
        #[arg(long, default_value = "l2")]
        weights: String,
        /// Per-element scalar permeability CSV (needed for wl2 weights).
        #[arg(long)]
        perm: Option<PathBuf>,
        /// Keep the flux on the Dirichlet boundary fixed.
        #[arg(long, default_value_t = false)]
        fix_dirichlet: bool,
        /// Output CSV path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config(_) => ExitCode::from(2),
            CliError::Numerical(_) => ExitCode::from(1),
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> CliError {
        match e {
            HarnessError::Mesh(m) => CliError::Config(m.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}

impl From<io::IoError> for CliError {
    fn from(e: io::IoError) -> CliError {
        CliError::Config(e.to_string())
    }
}

impl From<mesh::MeshError> for CliError {
    fn from(e: mesh::MeshError) -> CliError {
        CliError::Config(e.to_string())
    }
}

pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Consistency {
            grid,
            alpha,
            sigma,
            out,
        } => consistency(&grid, &alpha, sigma, out.as_deref()),
        Command::Converge {
            case,
            levels,
            alpha,
            transport_levels,
            out,
        } => converge(&case, levels, &alpha, transport_levels, out.as_deref()),
        Command::Run { config } => run_scenario_file(&config),
        Command::Postprocess {
            mesh,
            flux,
            source,
            weights,
            perm,
            fix_dirichlet,
            out,
        } => standalone_postprocess(
            &mesh,
            &flux,
            &source,
            &weights,
            perm.as_deref(),
            fix_dirichlet,
            out.as_deref(),
        ),
    }
}

fn parse_alpha(alpha: &str) -> Result<DirichletMode, CliError> {
    match alpha {
        "sd" => Ok(DirichletMode::Strong),
        "wd" => Ok(DirichletMode::Weak),
        "rd" => Ok(DirichletMode::Recovery),
        other => Err(CliError::Config(format!(
            "unknown alpha '{other}', expected sd, wd or rd"
        ))),
    }
}

fn consistency(
    grid: &str,
    alpha: &str,
    sigma: f64,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let grid = ConsistencyGrid::from_name(grid).ok_or_else(|| {
        CliError::Config(format!(
            "unknown grid '{grid}'; expected one of uniform1d, nonuniform1d, uniform2d, distorted, nonmatching"
        ))
    })?;
    let mode = parse_alpha(alpha)?;
    let r = harness::run_consistency(grid, mode, sigma)?;
    println!("grid,alpha,residual_u,residual_v,flux_err_u,flux_err_v");
    println!(
        "{},{},{},{},{},{}",
        grid.name(),
        alpha,
        io::fmt_full(r.residual_u),
        io::fmt_full(r.residual_v),
        io::fmt_full(r.flux_err_u),
        io::fmt_full(r.flux_err_v)
    );
    if !r.line_flux.is_empty() {
        println!("line_x,exact,extracted,corrected");
        for lf in &r.line_flux {
            println!(
                "{},{},{},{}",
                io::fmt_full(lf.x),
                io::fmt_full(lf.exact),
                io::fmt_full(lf.extracted),
                io::fmt_full(lf.corrected)
            );
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Config(e.to_string()))?;
        io::write_csv(
            &dir.join("consistency.csv"),
            &[
                "residual_u",
                "residual_v",
                "flux_err_u",
                "flux_err_v",
                "global_imbalance_u",
            ],
            &[vec![
                r.residual_u,
                r.residual_v,
                r.flux_err_u,
                r.flux_err_v,
                r.global_imbalance_u,
            ]],
        )?;
        if !r.line_flux.is_empty() {
            let rows: Vec<Vec<f64>> = r
                .line_flux
                .iter()
                .map(|lf| vec![lf.x, lf.exact, lf.extracted, lf.corrected])
                .collect();
            io::write_csv(
                &dir.join("line_flux.csv"),
                &["line_x", "exact", "extracted", "corrected"],
                &rows,
            )?;
        }
    }
    Ok(())
}

fn rate_to_cell(r: Option<&f64>) -> String {
    match r {
        None => "-".into(),
        Some(v) if v.is_nan() => "-".into(),
        Some(v) => format!("{v:.2}"),
    }
}

fn converge(
    case: &str,
    levels: usize,
    alpha: &str,
    transport_levels: Option<usize>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let case = match case {
        "smooth" => ConvergenceCase::Smooth,
        "distorted" => ConvergenceCase::Distorted,
        other => {
            return Err(CliError::Config(format!(
                "unknown case '{other}', expected smooth or distorted"
            )))
        }
    };
    if levels < 2 {
        return Err(CliError::Config("need at least two levels for rates".into()));
    }
    let mode = parse_alpha(alpha)?;
    let transport_levels = transport_levels.unwrap_or(levels);
    let table = harness::run_convergence(case, mode, levels, transport_levels)?;
    print_convergence(&table);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Config(e.to_string()))?;
        write_convergence_csv(&table, dir)?;
    }
    Ok(())
}

fn print_convergence(table: &ConvergenceTable) {
    let energy_rates = table.rates_of(|l| l.energy_error);
    let u_rates = table.rates_of(|l| l.flux_err_u);
    let v_rates = table.rates_of(|l| l.flux_err_v);
    let r_rates = table.rates_of(|l| l.residual_u);
    println!(
        "{:>10} {:>7} {:>11} {:>5} {:>11} {:>5} {:>11} {:>5} {:>11} {:>5} {:>10}",
        "h", "cells", "p_energy", "rate", "flux_U", "rate", "flux_V", "rate", "residual_U", "rate", "residual_V"
    );
    for (i, l) in table.levels.iter().enumerate() {
        let rate = |rs: &[f64]| {
            if i == 0 {
                "-".to_string()
            } else {
                rate_to_cell(rs.get(i - 1))
            }
        };
        println!(
            "{:>10.6} {:>7} {:>11.5} {:>5} {:>11.6} {:>5} {:>11.6} {:>5} {:>11.5} {:>5} {:>10.2e}",
            l.h,
            l.cells,
            l.energy_error,
            rate(&energy_rates),
            l.flux_err_u,
            rate(&u_rates),
            l.flux_err_v,
            rate(&v_rates),
            l.residual_u,
            rate(&r_rates),
            l.residual_v
        );
    }
    if table.levels.iter().any(|l| l.conc_err.is_some()) {
        println!(
            "{:>10} {:>13} {:>5} {:>13} {:>5} {:>13} {:>5}",
            "h", "conc(exact)", "rate", "conc(U)", "rate", "conc(V)", "rate"
        );
        let pick = |k: usize| {
            table.rates_of(move |l| l.conc_err.map(|c| c[k]).unwrap_or(f64::NAN))
        };
        let rates = [pick(0), pick(1), pick(2)];
        for (i, l) in table.levels.iter().enumerate() {
            let Some(c) = l.conc_err else { continue };
            let rate = |rs: &[f64]| {
                if i == 0 {
                    "-".to_string()
                } else {
                    rate_to_cell(rs.get(i - 1))
                }
            };
            println!(
                "{:>10.6} {:>13.5} {:>5} {:>13.5} {:>5} {:>13.5} {:>5}",
                l.h,
                c[0],
                rate(&rates[0]),
                c[1],
                rate(&rates[1]),
                c[2],
                rate(&rates[2])
            );
        }
    }
}

fn write_convergence_csv(table: &ConvergenceTable, dir: &Path) -> Result<(), CliError> {
    let rows: Vec<Vec<f64>> = table
        .levels
        .iter()
        .map(|l| {
            vec![
                l.h,
                l.dt,
                l.cells as f64,
                l.energy_error,
                l.flux_err_u,
                l.flux_err_v,
                l.residual_u,
                l.residual_v,
            ]
        })
        .collect();
    io::write_csv(
        &dir.join("flow_convergence.csv"),
        &[
            "h",
            "dt",
            "cells",
            "p_energy_error",
            "flux_error_U",
            "flux_error_V",
            "residual_U",
            "residual_V",
        ],
        &rows,
    )?;
    let conc_rows: Vec<Vec<f64>> = table
        .levels
        .iter()
        .filter_map(|l| l.conc_err.map(|c| vec![l.h, c[0], c[1], c[2]]))
        .collect();
    if !conc_rows.is_empty() {
        io::write_csv(
            &dir.join("transport_convergence.csv"),
            &["h", "conc_error_exact_flux", "conc_error_U", "conc_error_V"],
            &conc_rows,
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// scenario configuration
// ---------------------------------------------------------------------------

struct Config {
    values: BTreeMap<String, String>,
    consumed: std::cell::RefCell<Vec<String>>,
}

impl Config {
    fn parse(text: &str) -> Result<Config, CliError> {
        let mut values = BTreeMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!(
                    "config line {}: expected 'key = value', got '{raw}'",
                    i + 1
                )));
            };
            let full = if section.is_empty() {
                key.trim().to_string()
            } else {
                format!("{section}.{}", key.trim())
            };
            if values
                .insert(full.clone(), value.trim().to_string())
                .is_some()
            {
                return Err(CliError::Config(format!("duplicate config key '{full}'")));
            }
        }
        Ok(Config {
            values,
            consumed: std::cell::RefCell::new(Vec::new()),
        })
    }

    fn get(&self, key: &str) -> Option<String> {
        self.consumed.borrow_mut().push(key.to_string());
        self.values.get(key).cloned()
    }

    fn require(&self, key: &str) -> Result<String, CliError> {
        self.get(key)
            .ok_or_else(|| CliError::Config(format!("missing config key '{key}'")))
    }

    fn get_parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.get(key) {
            None => Ok(default),
            Some(text) => text
                .parse()
                .map_err(|_| CliError::Config(format!("invalid value '{text}' for '{key}'"))),
        }
    }

    fn reject_unknown(&self) -> Result<(), CliError> {
        let consumed = self.consumed.borrow();
        for key in self.values.keys() {
            if !consumed.contains(key) {
                return Err(CliError::Config(format!("unknown config key '{key}'")));
            }
        }
        Ok(())
    }
}

fn run_scenario_file(path: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg = Config::parse(&text)?;

    let kind = match cfg.require("scenario.kind")?.as_str() {
        "barrier" => ScenarioKind::Barrier {
            k_block: cfg.get_parsed("scenario.k_block", 1e-3)?,
        },
        "channel" => ScenarioKind::Channel {
            k_surround: cfg.get_parsed("scenario.k_surround", 1e-5)?,
        },
        "wellpair" => ScenarioKind::WellPair,
        other => {
            return Err(CliError::Config(format!(
                "unknown scenario kind '{other}', expected barrier, channel or wellpair"
            )))
        }
    };
    let mut spec = ScenarioSpec::defaults(kind);
    spec.n = cfg.get_parsed("scenario.n", spec.n)?;
    spec.dt = cfg.get_parsed("scenario.dt", spec.dt)?;
    spec.t_end = cfg.get_parsed("scenario.t_end", spec.t_end)?;
    if let Some(alpha) = cfg.get("flux.alpha") {
        spec.mode = parse_alpha(&alpha)?;
    }
    if let Some(theta) = cfg.get("flux.theta") {
        spec.averaging = match theta.as_str() {
            "central" => AveragingScheme::Central,
            "harmonic" => AveragingScheme::Harmonic,
            other => {
                return Err(CliError::Config(format!(
                    "unknown averaging '{other}', expected central or harmonic"
                )))
            }
        };
    }
    let with_pp = cfg.get_parsed("flux.postprocess", true)?;
    spec.postprocess = if with_pp {
        Some(match cfg.get("flux.weights").as_deref() {
            None | Some("wl2") => WeightScheme::InversePermeability,
            Some("l2") => WeightScheme::Uniform,
            Some(other) => {
                return Err(CliError::Config(format!(
                    "unknown weights '{other}', expected l2 or wl2"
                )))
            }
        })
    } else {
        let _ = cfg.get("flux.weights");
        None
    };
    let out_dir = PathBuf::from(cfg.get("output.dir").unwrap_or_else(|| "out".into()));
    let write_csv = cfg.get_parsed("output.csv", true)?;
    let write_vtk = cfg.get_parsed("output.vtk", false)?;
    let flux_dump = cfg.get_parsed("output.flux_dump", false)?;
    spec.snapshot_every = cfg.get_parsed("output.vtk_every", 0usize)?;
    if spec.snapshot_every > 0 && !write_vtk {
        return Err(CliError::Config(
            "output.vtk_every needs output.vtk = true".into(),
        ));
    }
    cfg.reject_unknown()?;

    let result = harness::run_scenario(&spec)?;
    let last = result
        .diagnostics
        .last()
        .ok_or_else(|| CliError::Numerical("scenario produced no steps".into()))?;
    println!(
        "residual_u = {:.6e}{}",
        result.residual_u,
        match result.residual_v {
            Some(v) => format!(", residual_v = {v:.6e}"),
            None => String::new(),
        }
    );
    println!(
        "t = {:.4}: overshoot = {:.6e}, min_c = {:.6e}, max_c = {:.6}, production = {:.6e}",
        last.time, last.overshoot, last.min_c, last.max_c, last.production_rate
    );

    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Config(e.to_string()))?;
    if write_csv {
        let rows: Vec<Vec<f64>> = result
            .diagnostics
            .iter()
            .map(|d| vec![d.time, d.overshoot, d.min_c, d.max_c, d.production_rate])
            .collect();
        io::write_csv(
            &out_dir.join("diagnostics.csv"),
            &["time", "overshoot", "min_c", "max_c", "production_rate"],
            &rows,
        )?;
        io::write_csv(
            &out_dir.join("summary.csv"),
            &["residual_u", "residual_v", "overshoot", "min_c", "max_c"],
            &[vec![
                result.residual_u,
                result.residual_v.unwrap_or(f64::NAN),
                last.overshoot,
                last.min_c,
                last.max_c,
            ]],
        )?;
    }
    if write_vtk {
        let pressure_cellwise = postprocess::CellField {
            values: (0..result.mesh.elements.len())
                .map(|e| {
                    let nodal = result.pressure.on_element(&result.mesh, e);
                    0.25 * (nodal[0] + nodal[1] + nodal[2] + nodal[3])
                })
                .collect(),
        };
        io::write_vtk(
            &result.mesh,
            &[
                ("concentration", &result.conc),
                ("pressure", &pressure_cellwise),
                ("conservation_residual", &result.residual_field),
            ],
            &out_dir.join("final.vtk"),
        )?;
        for (i, (_t, conc)) in result.snapshots.iter().enumerate() {
            io::write_vtk(
                &result.mesh,
                &[("concentration", conc)],
                &out_dir.join(format!("snapshot_{i:04}.vtk")),
            )?;
        }
    }
    if flux_dump {
        io::write_flux_csv(&result.flux, &result.mesh, &out_dir.join("flux.csv"))?;
        mesh::save_mesh(&result.mesh, &out_dir.join("mesh.txt"))?;
    }
    Ok(())
}

fn standalone_postprocess(
    mesh_path: &Path,
    flux_path: &Path,
    source_path: &Path,
    weights: &str,
    perm: Option<&Path>,
    fix_dirichlet: bool,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let mesh = mesh::load_mesh(mesh_path)?;
    let field = io::read_flux_csv(&mesh, flux_path)?;
    let source = io::read_source_csv(&mesh, source_path)?;
    let weights = match weights {
        "l2" => WeightScheme::Uniform,
        "wl2" => WeightScheme::InversePermeability,
        other => {
            return Err(CliError::Config(format!(
                "unknown weights '{other}', expected l2 or wl2"
            )))
        }
    };
    let permeability = match perm {
        None => PermeabilityField::isotropic(&mesh, 1.0),
        Some(path) => {
            let values = io::read_permeability_csv(&mesh, path)?;
            PermeabilityField::from_tensors(values.iter().map(|&k| [k, 0.0, k]).collect())
        }
    }
    .map_err(|e| CliError::Config(e.to_string()))?;

    let (corrected, _, report) = postprocess::postprocess_flux(
        &field,
        &source,
        &mesh,
        &permeability,
        weights,
        fix_dirichlet,
        SolverConfig::strict(),
    )
    .map_err(|e| CliError::Numerical(e.to_string()))?;
    eprintln!(
        "residual norm {:.6e}, max density {:.6e}, global imbalance {:.6e}",
        report.norm, report.max_density, report.global_imbalance
    );
    match out {
        Some(path) => io::write_flux_csv(&corrected, &mesh, path)?,
        None => {
            let tmp = std::env::temp_dir().join(format!("lcflux_pp_{}.csv", std::process::id()));
            io::write_flux_csv(&corrected, &mesh, &tmp)?;
            print!("{}", std::fs::read_to_string(&tmp).map_err(io::IoError::from)?);
            let _ = std::fs::remove_file(&tmp);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_sections_and_rejects_unknown_keys() {
        let cfg = Config::parse("[scenario]\nkind = barrier\nn = 16\n# comment\n[output]\ndir = /tmp/x\n").unwrap();
        assert_eq!(cfg.require("scenario.kind").unwrap(), "barrier");
        assert_eq!(cfg.get_parsed("scenario.n", 0usize).unwrap(), 16);
        assert!(cfg.reject_unknown().is_err()); // output.dir never consumed
        let _ = cfg.get("output.dir");
        assert!(cfg.reject_unknown().is_ok());
    }

    #[test]
    fn config_rejects_duplicates_and_garbage() {
        assert!(Config::parse("[a]\nx = 1\nx = 2\n").is_err());
        assert!(Config::parse("not a key value\n").is_err());
    }

    #[test]
    fn alpha_names_map_to_modes() {
        assert_eq!(parse_alpha("sd").unwrap(), DirichletMode::Strong);
        assert_eq!(parse_alpha("wd").unwrap(), DirichletMode::Weak);
        assert_eq!(parse_alpha("rd").unwrap(), DirichletMode::Recovery);
        assert!(parse_alpha("xx").is_err());
    }
}
