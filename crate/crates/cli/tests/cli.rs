use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_meshpinn");

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn mesh(dir: &Path, n: &str, amplitude: &str) {
    let o = run(
        &["mesh-gen", "--nx", n, "--ny", n, "--nz", n, "--amplitude", amplitude, "--out", "mesh.json"],
        dir,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn field(path: &Path) -> Vec<f64> {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn mesh_gen_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["mesh-gen", "--out", "m.json"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("nodes: 125"), "{text}");
    assert!(text.contains("tets: 384"), "{text}");
    assert!(text.contains("boundary nodes: 98"), "{text}");
    assert!(text.contains("dirichlet nodes: 50"), "{text}");
    assert!(dir.path().join("m.json").exists());
}

#[test]
fn mesh_gen_rejects_folding_amplitude() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["mesh-gen", "--amplitude", "0.9", "--out", "m.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("m.json").exists());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["mesh-gen", "--bogus"], dir.path()).status.code(), Some(1));
    assert_eq!(run(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn solve_ref_on_the_unit_cube_is_linear() {
    let dir = tempfile::tempdir().unwrap();
    mesh(dir.path(), "4", "0");
    let o = run(&["solve-ref", "--mesh", "mesh.json", "--out", "u.json"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    let max: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("max interior residual: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(max < 1e-6, "{max}");
    let mesh: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("mesh.json")).unwrap()).unwrap();
    let nodes = mesh["nodes"].as_array().unwrap();
    let u = field(&dir.path().join("u.json"));
    assert_eq!(u.len(), nodes.len());
    for (p, v) in nodes.iter().zip(&u) {
        let x = p[0].as_f64().unwrap();
        assert!((v - x).abs() < 1e-8, "u({x}) = {v}");
    }
}

#[test]
fn solve_ref_missing_mesh_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["solve-ref", "--mesh", "absent.json", "--out", "u.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.json"));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.json"),
        r#"{"variant": "pinn/mae", "epochs": 5, "nx": 2, "ny": 2, "nz": 2, "output_dir": "res"}"#,
    )
    .unwrap();
    let o = run(&["train", "--config", "run.json"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let line = text.lines().nth(1).unwrap();
    let cells: Vec<&str> = line.split(',').collect();
    assert_eq!(cells[0], "pinn/mae");
    assert_eq!(&cells[4..], ["5", "0", "-"]);
    let res = dir.path().join("res");
    for f in ["history.csv", "checkpoint.json", "prediction.json", "metrics.csv"] {
        assert!(res.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(res.join("history.csv")).unwrap().lines().count(), 6);
    assert_eq!(field(&res.join("prediction.json")).len(), 27);

    let o = run(&["eval", "--config", "run.json", "--checkpoint", "res/checkpoint.json"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eval_line = stdout(&o).lines().nth(1).unwrap().to_string();
    let eval_cells: Vec<&str> = eval_line.split(',').collect();
    // same parameters, same metrics
    assert_eq!(&eval_cells[..4], &cells[..4]);

    let o = run(&["eval", "--config", "run.json", "--checkpoint", "target"], dir.path());
    assert!(o.status.success());
    let target_line = stdout(&o).lines().nth(1).unwrap().to_string();
    let t: Vec<&str> = target_line.split(',').collect();
    assert_eq!(t[0], "target");
    assert!(t[1].parse::<f64>().unwrap() <= 1e-6);
    assert_eq!(t[2].parse::<f64>().unwrap(), 0.0);
    assert_eq!(t[3], "-");
}

#[test]
fn eval_rejects_checkpoint_of_other_model() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("pinn.json"),
        r#"{"variant": "pinn/mae", "epochs": 1, "nx": 2, "ny": 2, "nz": 2}"#,
    )
    .unwrap();
    fs::write(
        dir.path().join("piecn.json"),
        r#"{"variant": "piecn/mae", "nx": 2, "ny": 2, "nz": 2}"#,
    )
    .unwrap();
    assert!(run(&["train", "--config", "pinn.json"], dir.path()).status.success());
    let o = run(&["eval", "--config", "piecn.json", "--checkpoint", "out/checkpoint.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_variant_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.json"), r#"{"variant": "cnn/mae"}"#).unwrap();
    let o = run(&["train", "--config", "run.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.json"), r#"{"variant": "pinn/mae", "epoch": 3}"#).unwrap();
    let o = run(&["train", "--config", "run.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn export_vtk_writes_fields() {
    let dir = tempfile::tempdir().unwrap();
    mesh(dir.path(), "2", "0.25");
    assert!(run(&["solve-ref", "--mesh", "mesh.json", "--out", "u.json"], dir.path())
        .status
        .success());
    let o = run(
        &["export-vtk", "--mesh", "mesh.json", "--target", "u.json", "--prediction", "u.json", "--out", "m.vtk"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let vtk = fs::read_to_string(dir.path().join("m.vtk")).unwrap();
    assert!(vtk.starts_with("# vtk DataFile Version"));
    assert!(vtk.contains("POINTS 27 double"));
    assert!(vtk.contains("CELLS 48 240"));
    for name in ["target", "prediction", "abs_error", "bc_value"] {
        assert!(vtk.contains(&format!("SCALARS {name} double 1")), "{name}");
    }
}

#[test]
fn export_vtk_rejects_wrong_field_length() {
    let dir = tempfile::tempdir().unwrap();
    mesh(dir.path(), "2", "0");
    fs::write(dir.path().join("short.json"), "[1.0, 2.0]").unwrap();
    let o = run(
        &["export-vtk", "--mesh", "mesh.json", "--target", "short.json", "--out", "m.vtk"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("m.vtk").exists());
}

#[test]
fn demo_flaw_reports_exact_tape_derivative() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["demo-flaw", "--out", "flaw.csv", "--samples", "40"], dir.path());
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("max |tape - beta|: 0.0"), "{text}");
    assert!(text.contains("max |analytic - tape|: 2.0"), "{text}");
    let csv = fs::read_to_string(dir.path().join("flaw.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("x1,tape_derivative,analytic,fe_chain"));
    assert_eq!(csv.lines().count(), 41);
}

#[test]
fn reproduce_table_small_run() {
    let dir = tempfile::tempdir().unwrap();
    mesh(dir.path(), "2", "0.25");
    let o = run(
        &["reproduce-table", "--mesh", "mesh.json", "--seeds", "2", "--epochs", "3", "--out", "t"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(dir.path().join("t/metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "variant,spatial_residual,mae,autodiff_residual,epochs,seed,wall_seconds");
    assert_eq!(lines.len(), 1 + 12 + 1);
    assert!(lines[1].starts_with("pinn/autodiff_residual,"));
    assert!(lines[13].starts_with("target,"));
    let summary = fs::read_to_string(dir.path().join("t/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 6 + 1);
}
