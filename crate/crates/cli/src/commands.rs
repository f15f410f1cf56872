use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use meshpinn::export::write_vtk;
use meshpinn::fem::{reference_solve, FemOperators};
use meshpinn::mesh::Mesh;
use meshpinn::models::ParamSet;
use meshpinn::training::{
    self, demo_autodiff_flaw, evaluate, format_table, metrics_csv, summary_csv, write_history,
    Metrics, Predictor, Problem, TrainConfig, METRICS_HEADER, TABLE_ORDER,
};

use crate::config::RunConfig;
use crate::error::CliError;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn load_mesh(path: &Path) -> Result<Mesh, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Mesh::from_json(&text).map_err(|e| match e {
        meshpinn::mesh::MeshError::Parse { .. } => {
            CliError::Usage(format!("{}: {e}", path.display()))
        }
        other => other.into(),
    })
}

fn load_field(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Usage(format!(
            "{}: expected a JSON array of numbers: {e}",
            path.display()
        ))
    })
}

fn field_json(values: &[f64]) -> String {
    serde_json::to_string(values).expect("finite or not, a Vec<f64> serializes")
}

pub fn mesh_gen(nx: usize, ny: usize, nz: usize, amplitude: f64, out: &Path) -> Result<(), CliError> {
    let mesh = Mesh::generate_box(nx, ny, nz)?.deformed(amplitude)?;
    write_file(out, mesh.to_json())?;
    let dirichlet: usize = mesh.dirichlet().iter().map(|p| p.nodes.len()).sum();
    println!("nodes: {}", mesh.num_nodes());
    println!("tets: {}", mesh.num_tets());
    println!("boundary nodes: {}", mesh.boundary_nodes().len());
    println!("dirichlet nodes: {dirichlet}");
    Ok(())
}

pub fn solve_ref(mesh: &Path, tol: f64, out: &Path) -> Result<(), CliError> {
    let mesh = load_mesh(mesh)?;
    let ops = FemOperators::assemble(&mesh)?;
    let sol = reference_solve(&mesh, &ops.stiffness, tol)?;
    let residual = ops.residual.apply(&sol.values)?;
    let max = residual.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    write_file(out, field_json(&sol.values))?;
    println!("cg iterations: {}", sol.iterations);
    println!("relative residual: {:e}", sol.relative_residual);
    println!("max interior residual: {max:e}");
    Ok(())
}

/// Mesh and target named by a run config; the target is solved for when
/// the config does not provide one.
fn load_problem(config: &RunConfig) -> Result<Problem, CliError> {
    let mesh = match &config.mesh {
        Some(path) => load_mesh(path)?,
        None => Mesh::generate_box(config.nx, config.ny, config.nz)?.deformed(config.amplitude)?,
    };
    let ops = FemOperators::assemble(&mesh)?;
    let target = match &config.target {
        Some(path) => load_field(path)?,
        None => reference_solve(&mesh, &ops.stiffness, config.reference_tol)?.values,
    };
    Ok(Problem::with_operators(mesh, &ops, Some(target))?)
}

fn cell(v: f64) -> String {
    format!("{v:e}")
}

fn metrics_line(
    label: &str,
    m: &Metrics,
    epochs: Option<usize>,
    seed: Option<u64>,
    wall: Option<f64>,
) -> String {
    let dash = || "-".to_string();
    format!(
        "{label},{},{},{},{},{},{}",
        cell(m.spatial_residual),
        cell(m.mae),
        m.autodiff_residual.map_or_else(dash, cell),
        epochs.map_or_else(dash, |e| e.to_string()),
        seed.map_or_else(dash, |s| s.to_string()),
        wall.map_or_else(dash, |w| format!("{w:.3}")),
    )
}

pub fn train(config_path: &Path, timings: bool) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    let train_config = config.train_config();
    let problem = load_problem(&config)?;
    let start = Instant::now();
    let outcome = training::train(&train_config, &problem)?;
    let wall = timings.then(|| start.elapsed().as_secs_f64());
    let arch = train_config.architecture();
    let metrics = evaluate(
        Predictor::Model {
            architecture: &arch,
            params: &outcome.params,
        },
        &problem,
    )?;
    let prediction = training::predict(&arch, &outcome.params, &problem)?;

    let dir = &config.output_dir;
    let mut history = Vec::new();
    write_history(&mut history, &outcome.history).map_err(|e| CliError::io(dir, e))?;
    write_file(&dir.join("history.csv"), history)?;
    write_file(&config.checkpoint_path(), outcome.params.to_json())?;
    write_file(&dir.join("prediction.json"), field_json(&prediction))?;
    let line = metrics_line(
        &train_config.variant.to_string(),
        &metrics,
        Some(train_config.epochs),
        Some(train_config.seed),
        wall,
    );
    write_file(&dir.join("metrics.csv"), format!("{METRICS_HEADER}\n{line}\n"))?;
    println!("{METRICS_HEADER}");
    println!("{line}");
    Ok(())
}

pub fn eval(config_path: &Path, checkpoint: &str) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    let problem = load_problem(&config)?;
    let line = if checkpoint == "target" {
        let target = problem.target().expect("load_problem always sets a target");
        let m = evaluate(Predictor::Field(target), &problem)?;
        metrics_line("target", &m, None, None, None)
    } else {
        let train_config = config.train_config();
        let arch = train_config.architecture();
        let params = ParamSet::load(checkpoint)?;
        arch.check_params(&params)?;
        let m = evaluate(
            Predictor::Model {
                architecture: &arch,
                params: &params,
            },
            &problem,
        )?;
        metrics_line(
            &train_config.variant.to_string(),
            &m,
            None,
            Some(params.seed()),
            None,
        )
    };
    println!("{METRICS_HEADER}");
    println!("{line}");
    Ok(())
}

pub struct TableOptions {
    pub mesh: PathBuf,
    pub seeds: usize,
    pub out: PathBuf,
    pub epochs: usize,
    pub first_seed: u64,
    pub learning_rate: f64,
    pub tol: f64,
    pub timings: bool,
}

pub fn reproduce_table(opts: &TableOptions) -> Result<(), CliError> {
    if opts.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let mesh = load_mesh(&opts.mesh)?;
    let ops = FemOperators::assemble(&mesh)?;
    let target = reference_solve(&mesh, &ops.stiffness, opts.tol)?.values;
    let problem = Problem::with_operators(mesh, &ops, Some(target))?;
    let mut base = TrainConfig::new(TABLE_ORDER[0]);
    base.epochs = opts.epochs;
    base.adam.learning_rate = opts.learning_rate;
    base.validate()?;
    let seeds: Vec<u64> = (0..opts.seeds as u64).map(|k| opts.first_seed + k).collect();
    let total = TABLE_ORDER.len() * seeds.len();
    let mut done = 0;
    let report = training::reproduce_table(&problem, &base, &seeds, opts.timings, |r| {
        done += 1;
        match &r.result {
            Ok(m) => eprintln!(
                "[{done}/{total}] {} seed {}: mae {:e}, spatial residual {:e}",
                r.variant, r.seed, m.mae, m.spatial_residual
            ),
            Err(e) => eprintln!("[{done}/{total}] {} seed {}: FAILED: {e}", r.variant, r.seed),
        }
    })?;
    write_file(&opts.out.join("metrics.csv"), metrics_csv(&report))?;
    write_file(&opts.out.join("summary.csv"), summary_csv(&report))?;
    print!("{}", format_table(&report));
    if report.any_failed() {
        return Err(CliError::Numerical(
            "some runs failed; their cells are marked FAILED".into(),
        ));
    }
    Ok(())
}

pub fn export_vtk(
    mesh: &Path,
    target: Option<PathBuf>,
    prediction: Option<PathBuf>,
    extra: &[String],
    out: &Path,
) -> Result<(), CliError> {
    let mesh = load_mesh(mesh)?;
    let mut fields: Vec<(String, Vec<f64>)> = Vec::new();
    let target = target.map(|p| load_field(&p)).transpose()?;
    let prediction = prediction.map(|p| load_field(&p)).transpose()?;
    if let Some(t) = &target {
        fields.push(("target".into(), t.clone()));
    }
    if let Some(p) = &prediction {
        fields.push(("prediction".into(), p.clone()));
    }
    if let (Some(t), Some(p)) = (&target, &prediction) {
        if t.len() == p.len() {
            let err = t.iter().zip(p).map(|(t, p)| (t - p).abs()).collect();
            fields.push(("abs_error".into(), err));
        }
    }
    let bc = mesh
        .dirichlet_values()
        .into_iter()
        .map(|v| v.unwrap_or(0.0))
        .collect();
    fields.push(("bc_value".into(), bc));
    for spec in extra {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--field {spec:?} is not NAME=PATH")))?;
        fields.push((name.to_string(), load_field(Path::new(path))?));
    }
    let borrowed: Vec<(&str, &[f64])> = fields
        .iter()
        .map(|(n, v)| (n.as_str(), v.as_slice()))
        .collect();
    let mut buf = Vec::new();
    write_vtk(&mut buf, &mesh, &borrowed)?;
    write_file(out, buf)?;
    let names: Vec<&str> = borrowed.iter().map(|(n, _)| *n).collect();
    println!("wrote {} ({})", out.display(), names.join(", "));
    Ok(())
}

pub fn demo_flaw(out: &Path, samples: usize) -> Result<(), CliError> {
    let report = demo_autodiff_flaw(samples).map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(out, report.to_csv())?;
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "samples: {samples}");
    let _ = writeln!(stdout, "max |tape - beta|: {:?}", report.tape_deviation);
    let _ = writeln!(stdout, "max |analytic - tape|: {:?}", report.analytic_vs_tape);
    let _ = writeln!(stdout, "max |fe_chain - analytic|: {:e}", report.fe_error);
    for (level, ratio) in report.refinement.iter().skip(1).zip(report.refinement_ratios()) {
        let _ = writeln!(
            stdout,
            "fe_chain error at {} samples: {:e} (reduction {ratio:.3}x)",
            level.samples, level.fe_error
        );
    }
    Ok(())
}
