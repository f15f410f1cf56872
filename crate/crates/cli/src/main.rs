mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "meshpinn", version, about = "Physics-informed surrogates on tetrahedral meshes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a (deformed) box mesh.
    MeshGen(MeshGenArgs),
    /// Solve the Laplace problem on a mesh with the finite-element solver.
    SolveRef(SolveRefArgs),
    /// Train one model/loss variant.
    Train(TrainArgs),
    /// Score a checkpoint, or the target itself with `--checkpoint target`.
    Eval(EvalArgs),
    /// Train every variant for several seeds and tabulate the metrics.
    ReproduceTable(TableArgs),
    /// Write mesh and nodal fields as a legacy VTK file.
    ExportVtk(ExportArgs),
    /// Compare tape, analytic and recovered derivatives of a field-input model.
    DemoFlaw(FlawArgs),
}

#[derive(Debug, Args)]
struct MeshGenArgs {
    #[arg(long, default_value_t = 4)]
    nx: usize,
    #[arg(long, default_value_t = 4)]
    ny: usize,
    #[arg(long, default_value_t = 4)]
    nz: usize,
    #[arg(long, default_value_t = 0.0)]
    amplitude: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SolveRefArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Record wall-clock seconds in the metrics line.
    #[arg(long)]
    timings: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint file, or `target` to score the target solution.
    #[arg(long)]
    checkpoint: String,
}

#[derive(Debug, Args)]
struct TableArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// Output directory for metrics.csv and summary.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    epochs: usize,
    /// First seed; runs use `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Tolerance of the reference solve.
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Record wall-clock seconds per run.
    #[arg(long)]
    timings: bool,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    mesh: PathBuf,
    /// Target solution (JSON array).
    #[arg(long)]
    target: Option<PathBuf>,
    /// Model prediction (JSON array).
    #[arg(long)]
    prediction: Option<PathBuf>,
    /// Extra field as NAME=PATH; may be repeated.
    #[arg(long = "field", value_name = "NAME=PATH")]
    fields: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FlawArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    samples: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::MeshGen(a) => commands::mesh_gen(a.nx, a.ny, a.nz, a.amplitude, &a.out),
        Command::SolveRef(a) => commands::solve_ref(&a.mesh, a.tol, &a.out),
        Command::Train(a) => commands::train(&a.config, a.timings),
        Command::Eval(a) => commands::eval(&a.config, &a.checkpoint),
        Command::ReproduceTable(a) => commands::reproduce_table(&commands::TableOptions {
            mesh: a.mesh,
            seeds: a.seeds,
            out: a.out,
            epochs: a.epochs,
            first_seed: a.seed,
            learning_rate: a.learning_rate,
            tol: a.tol,
            timings: a.timings,
        }),
        Command::ExportVtk(a) => {
            commands::export_vtk(&a.mesh, a.target, a.prediction, &a.fields, &a.out)
        }
        Command::DemoFlaw(a) => commands::demo_flaw(&a.out, a.samples),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
