//! End-to-end tests of the `lcflux` binary: output formats, exit codes and
//! byte-level determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lcflux::flux::FaceField;
use lcflux::io;
use lcflux::mesh::{build_cartesian, save_mesh, Rect, SideMarkers};
use lcflux::postprocess::SourceSpec;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lcflux"))
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("lcflux_cli_tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn consistency_row_matches_the_reference_values() {
    let out = run_ok(bin().args(["consistency", "--grid", "uniform1d", "--alpha", "sd"]));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let mut lines = stdout.lines();
    assert_eq!(
        lines.next().unwrap(),
        "grid,alpha,residual_u,residual_v,flux_err_u,flux_err_v"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "uniform1d");
    assert_eq!(row[1], "sd");
    let residual_u: f64 = row[2].parse().unwrap();
    let residual_v: f64 = row[3].parse().unwrap();
    let flux_err_u: f64 = row[4].parse().unwrap();
    let flux_err_v: f64 = row[5].parse().unwrap();
    assert!((residual_u - 0.707).abs() < 1e-3);
    assert!(residual_v < 1e-12);
    assert!((flux_err_u - 0.354).abs() < 1e-3);
    assert!(flux_err_v < 1e-12);
}

#[test]
fn unknown_grid_is_a_usage_error() {
    let out = bin()
        .args(["consistency", "--grid", "moebius", "--alpha", "sd"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn postprocess_is_idempotent_on_a_conservative_dump() {
    let dir = tmp_dir("pp_idempotent");
    let mesh = build_cartesian(4, 4, Rect::unit(), SideMarkers::flow_in_x()).unwrap();
    let mesh_path = dir.join("mesh.txt");
    save_mesh(&mesh, &mesh_path).unwrap();
    // exact flux of the quasi-1D reference problem is already conservative
    let field = FaceField::from_exact(&mesh, |x, _, n| 2.0 * x * n[0]);
    let flux_path = dir.join("flux.csv");
    io::write_flux_csv(&field, &mesh, &flux_path).unwrap();
    let source = SourceSpec::from_fn(&mesh, &|_, _, _| 2.0, 0.0);
    let source_path = dir.join("source.csv");
    io::write_source_csv(&source, &source_path).unwrap();

    let out_path = dir.join("corrected.csv");
    run_ok(bin().args([
        "postprocess",
        "--mesh",
        mesh_path.to_str().unwrap(),
        "--flux",
        flux_path.to_str().unwrap(),
        "--source",
        source_path.to_str().unwrap(),
        "--weights",
        "l2",
        "--out",
        out_path.to_str().unwrap(),
    ]));
    let corrected = io::read_flux_csv(&mesh, &out_path).unwrap();
    for f in 0..field.len() {
        assert!(
            (corrected.mean[f] - field.mean[f]).abs() <= 1e-12,
            "face {f}: {} vs {}",
            corrected.mean[f],
            field.mean[f]
        );
    }
}

#[test]
fn incompatible_postprocess_input_is_a_numerical_error() {
    let dir = tmp_dir("pp_incompatible");
    let mesh = build_cartesian(3, 3, Rect::unit(), SideMarkers::all_neumann()).unwrap();
    let mesh_path = dir.join("mesh.txt");
    save_mesh(&mesh, &mesh_path).unwrap();
    let flux_path = dir.join("flux.csv");
    io::write_flux_csv(&FaceField::zeros(&mesh), &mesh, &flux_path).unwrap();
    // net source without boundary outflow cannot be balanced
    let source_path = dir.join("source.csv");
    io::write_source_csv(&SourceSpec::from_fn(&mesh, &|_, _, _| 1.0, 0.0), &source_path).unwrap();
    let out = bin()
        .args([
            "postprocess",
            "--mesh",
            mesh_path.to_str().unwrap(),
            "--flux",
            flux_path.to_str().unwrap(),
            "--source",
            source_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("balanced"));
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.ini");
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn scenario_outputs_are_byte_identical_across_runs() {
    let dir = tmp_dir("determinism");
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let config = write_config(
            dir.as_path(),
            &format!(
                "[scenario]\nkind = barrier\nn = 16\ndt = 0.05\nt_end = 0.5\n\n[flux]\ntheta = harmonic\npostprocess = true\nweights = wl2\n\n[output]\ndir = {}\nflux_dump = true\n",
                out.display()
            ),
        );
        run_ok(bin().args(["run", "--config", config.to_str().unwrap()]));
    }
    for name in ["diagnostics.csv", "summary.csv", "flux.csv", "mesh.txt"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tmp_dir("badkey");
    let config = write_config(
        dir.as_path(),
        "[scenario]\nkind = barrier\nturbo = yes\n[output]\ndir = /tmp/nowhere\n",
    );
    let out = bin()
        .args(["run", "--config", config.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("turbo"));
}

#[test]
fn scenario_run_emits_parseable_vtk() {
    let dir = tmp_dir("vtk");
    let out_dir = dir.join("out");
    let config = write_config(
        dir.as_path(),
        &format!(
            "[scenario]\nkind = wellpair\nn = 16\ndt = 0.1\nt_end = 0.4\n\n[output]\ndir = {}\nvtk = true\nvtk_every = 2\n",
            out_dir.display()
        ),
    );
    run_ok(bin().args(["run", "--config", config.to_str().unwrap()]));
    let text = std::fs::read_to_string(out_dir.join("final.vtk")).unwrap();
    assert!(text.starts_with("# vtk DataFile Version 3.0"));
    assert!(text.contains("CELL_DATA 256"));
    assert!(text.contains("SCALARS concentration double 1"));
    assert!(out_dir.join("snapshot_0000.vtk").exists());
    assert!(out_dir.join("snapshot_0001.vtk").exists());
}

#[test]
fn converge_reports_rate_columns() {
    let out = run_ok(bin().args([
        "converge",
        "--case",
        "smooth",
        "--levels",
        "2",
        "--alpha",
        "sd",
        "--transport-levels",
        "0",
    ]));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("p_energy"));
    // second level carries rate entries close to the expected orders
    let last = stdout.lines().last().unwrap();
    assert!(last.contains("1.00"), "missing energy rate in: {last}");
    assert!(last.contains("1.55"), "missing flux rate in: {last}");
}
