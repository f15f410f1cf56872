use std::fmt::Write as _;
use std::time::Instant;

use super::{
    evaluate, train, LossKind, Metrics, ModelKind, Predictor, Problem, TrainConfig, TrainError,
    Variant,
};

/// Row order of the results table.
pub const TABLE_ORDER: [Variant; 6] = [
    Variant::new(ModelKind::Pinn, LossKind::AutodiffResidual),
    Variant::new(ModelKind::Piecn, LossKind::AutodiffResidual),
    Variant::new(ModelKind::Pinn, LossKind::Mae),
    Variant::new(ModelKind::Piecn, LossKind::Mae),
    Variant::new(ModelKind::Pinn, LossKind::MaePlusSpatial),
    Variant::new(ModelKind::Piecn, LossKind::MaePlusSpatial),
];

pub const METRICS_HEADER: &str = "variant,spatial_residual,mae,autodiff_residual,epochs,seed,wall_seconds";

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub variant: Variant,
    pub seed: u64,
    pub epochs: usize,
    /// Error message of a failed run.
    pub result: Result<Metrics, String>,
    pub wall_seconds: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TableReport {
    pub runs: Vec<RunRecord>,
    pub target: Metrics,
}

impl TableReport {
    /// Seed mean of each metric, or `None` when any seed failed.
    pub fn mean(&self, variant: Variant) -> Option<Metrics> {
        let runs: Vec<&Metrics> = self
            .runs
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.result.as_ref().ok())
            .collect::<Option<_>>()?;
        if runs.is_empty() {
            return None;
        }
        let k = runs.len() as f64;
        let autodiff = runs
            .iter()
            .map(|m| m.autodiff_residual)
            .sum::<Option<f64>>()
            .map(|s| s / k);
        Some(Metrics {
            spatial_residual: runs.iter().map(|m| m.spatial_residual).sum::<f64>() / k,
            mae: runs.iter().map(|m| m.mae).sum::<f64>() / k,
            autodiff_residual: autodiff,
        })
    }

    pub fn any_failed(&self) -> bool {
        self.runs.iter().any(|r| r.result.is_err())
    }
}

/// Trains every variant for every seed and scores the reference solution.
///
/// A failed run is recorded and the table carries on. `progress` sees each
/// run as it finishes.
pub fn reproduce_table(
    problem: &Problem,
    base: &TrainConfig,
    seeds: &[u64],
    timings: bool,
    mut progress: impl FnMut(&RunRecord),
) -> Result<TableReport, TrainError> {
    let target = problem.require_target()?;
    let target = evaluate(Predictor::Field(target), problem)?;
    let mut runs = Vec::with_capacity(TABLE_ORDER.len() * seeds.len());
    for variant in TABLE_ORDER {
        for &seed in seeds {
            let config = TrainConfig {
                variant,
                seed,
                ..*base
            };
            let start = Instant::now();
            let result = train(&config, problem)
                .and_then(|out| {
                    evaluate(
                        Predictor::Model {
                            architecture: &config.architecture(),
                            params: &out.params,
                        },
                        problem,
                    )
                })
                .map_err(|e| e.to_string());
            let record = RunRecord {
                variant,
                seed,
                epochs: config.epochs,
                result,
                wall_seconds: timings.then(|| start.elapsed().as_secs_f64()),
            };
            progress(&record);
            runs.push(record);
        }
    }
    Ok(TableReport { runs, target })
}

fn cell(v: f64) -> String {
    format!("{v:e}")
}

/// The autodiff column only applies to models trained on it.
fn autodiff_cell(variant: Option<Variant>, m: &Metrics) -> String {
    match (variant, m.autodiff_residual) {
        (Some(v), Some(a)) if v.loss == LossKind::AutodiffResidual => cell(a),
        _ => "-".into(),
    }
}

fn metric_cells(variant: Option<Variant>, result: &Result<Metrics, String>) -> String {
    match result {
        Ok(m) => format!(
            "{},{},{}",
            cell(m.spatial_residual),
            cell(m.mae),
            autodiff_cell(variant, m)
        ),
        Err(_) => "FAILED,FAILED,FAILED".into(),
    }
}

/// One row per run plus the target row.
pub fn metrics_csv(report: &TableReport) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in &report.runs {
        let wall = r.wall_seconds.map_or("-".into(), |w| format!("{w:.3}"));
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.variant,
            metric_cells(Some(r.variant), &r.result),
            r.epochs,
            r.seed,
            wall
        );
    }
    let _ = writeln!(
        out,
        "target,{},-,-,-",
        metric_cells(None, &Ok(report.target))
    );
    out
}

/// Seed means per variant plus the target row.
pub fn summary_csv(report: &TableReport) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for v in TABLE_ORDER {
        let runs: Vec<&RunRecord> = report.runs.iter().filter(|r| r.variant == v).collect();
        let Some(first) = runs.first() else { continue };
        let mean = report.mean(v).ok_or_else(String::new);
        let wall = runs
            .iter()
            .map(|r| r.wall_seconds)
            .sum::<Option<f64>>()
            .map_or("-".into(), |w| format!("{:.3}", w / runs.len() as f64));
        let _ = writeln!(
            out,
            "{v},{},{},mean,{wall}",
            metric_cells(Some(v), &mean),
            first.epochs
        );
    }
    let _ = writeln!(
        out,
        "target,{},-,-,-",
        metric_cells(None, &Ok(report.target))
    );
    out
}

/// Human-readable table of seed means.
pub fn format_table(report: &TableReport) -> String {
    let mut out = format!(
        "{:<24} {:>14} {:>14} {:>14}\n",
        "", "PDE residual", "MAE", "autodiff res."
    );
    let fmt_row = |label: &str, cells: [String; 3]| {
        format!(
            "{label:<24} {:>14} {:>14} {:>14}\n",
            cells[0], cells[1], cells[2]
        )
    };
    for v in TABLE_ORDER {
        let cells = match report.mean(v) {
            Some(m) => [
                format!("{:.3e}", m.spatial_residual),
                format!("{:.3e}", m.mae),
                match m.autodiff_residual {
                    Some(a) if v.loss == LossKind::AutodiffResidual => format!("{a:.3e}"),
                    _ => "-".into(),
                },
            ],
            None => ["FAILED".into(), "FAILED".into(), "FAILED".into()],
        };
        out.push_str(&fmt_row(&v.to_string(), cells));
    }
    let t = report.target;
    out.push_str(&fmt_row(
        "target",
        [
            format!("{:.3e}", t.spatial_residual),
            format!("{:.3e}", t.mae),
            "-".into(),
        ],
    ));
    out
}
