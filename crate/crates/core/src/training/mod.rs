//! Losses, optimization and metrics for the six model/loss variants.

mod adam;
mod flaw;
mod table;

pub use adam::{Adam, AdamConfig};
pub use flaw::{demo_autodiff_flaw, FlawReport, FlawResolution};
pub use table::{
    format_table, metrics_csv, reproduce_table, summary_csv, RunRecord, TableReport, METRICS_HEADER,
    TABLE_ORDER,
};

use std::fmt;
use std::io::Write;
use std::rc::Rc;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{input_laplacian, SharedOperator, Tape, TapeError, Tensor, Var};
use crate::fem::{FemError, FemOperators, ResidualOperator};
use crate::mesh::Mesh;
use crate::models::{
    Activation, Aggregation, Architecture, MeshGraph, ModelError, NodeFeatures, ParamSet,
    PiecnSpec, COORD_COLUMNS,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    MissingInput(String),
    #[error("non-finite loss at epoch {epoch}: {terms}")]
    NonFinite { epoch: usize, terms: LossBreakdown },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Pinn,
    Piecn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    AutodiffResidual,
    Mae,
    MaePlusSpatial,
}

/// A model/loss pair, written `model/loss`, e.g. `piecn/mae_plus_spatial`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Variant {
    pub model: ModelKind,
    pub loss: LossKind,
}

impl Variant {
    pub const fn new(model: ModelKind, loss: LossKind) -> Self {
        Variant { model, loss }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let model = match self.model {
            ModelKind::Pinn => "pinn",
            ModelKind::Piecn => "piecn",
        };
        let loss = match self.loss {
            LossKind::AutodiffResidual => "autodiff_residual",
            LossKind::Mae => "mae",
            LossKind::MaePlusSpatial => "mae_plus_spatial",
        };
        write!(f, "{model}/{loss}")
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (model, loss) = s
            .split_once('/')
            .ok_or_else(|| format!("variant {s:?} is not of the form model/loss"))?;
        let model = match model {
            "pinn" => ModelKind::Pinn,
            "piecn" => ModelKind::Piecn,
            _ => return Err(format!("unknown model {model:?} (expected pinn or piecn)")),
        };
        let loss = match loss {
            "autodiff_residual" => LossKind::AutodiffResidual,
            "mae" => LossKind::Mae,
            "mae_plus_spatial" => LossKind::MaePlusSpatial,
            _ => {
                return Err(format!(
                    "unknown loss {loss:?} (expected autodiff_residual, mae or mae_plus_spatial)"
                ))
            }
        };
        Ok(Variant { model, loss })
    }
}

impl TryFrom<String> for Variant {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub mae: f64,
    pub spatial: f64,
    pub autodiff: f64,
    pub boundary: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mae: 1.0,
            spatial: 0.01,
            autodiff: 1.0,
            boundary: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub seed: u64,
    pub activation: Activation,
    pub aggregation: Aggregation,
}

impl TrainConfig {
    pub fn new(variant: Variant) -> Self {
        TrainConfig {
            variant,
            epochs: 2000,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            activation: Activation::Relu,
            aggregation: Aggregation::Max,
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self.variant.model {
            ModelKind::Pinn => Architecture::pinn(self.activation),
            ModelKind::Piecn => match Architecture::piecn(self.activation) {
                Architecture::Piecn(spec) => Architecture::Piecn(PiecnSpec {
                    aggregation: self.aggregation,
                    ..spec
                }),
                other => other,
            },
        }
    }

    /// Weights of the terms this variant uses, in `(name, weight)` form.
    fn active_weights(&self) -> Vec<(&'static str, f64)> {
        let w = self.weights;
        match self.variant.loss {
            LossKind::Mae => vec![("w_mae", w.mae)],
            LossKind::MaePlusSpatial => vec![("w_mae", w.mae), ("w_spatial", w.spatial)],
            LossKind::AutodiffResidual => {
                vec![("w_autodiff", w.autodiff), ("w_boundary", w.boundary)]
            }
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let w = self.weights;
        for (name, v) in [
            ("w_mae", w.mae),
            ("w_spatial", w.spatial),
            ("w_autodiff", w.autodiff),
            ("w_boundary", w.boundary),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TrainError::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.active_weights().iter().all(|&(_, v)| v == 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "every loss term of {} has zero weight",
                self.variant
            )));
        }
        let a = self.adam;
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                a.learning_rate
            )));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(TrainError::InvalidConfig(format!(
                "adam betas must lie in [0, 1), got ({}, {})",
                a.beta1, a.beta2
            )));
        }
        if !(a.epsilon > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "adam epsilon must be positive, got {}",
                a.epsilon
            )));
        }
        Ok(())
    }
}

/// Everything a run needs about one mesh, shared by all variants.
#[derive(Debug, Clone)]
pub struct Problem {
    mesh: Mesh,
    graph: MeshGraph,
    features: NodeFeatures,
    residual: Arc<ResidualOperator>,
    interior: Rc<[usize]>,
    dirichlet: Rc<[usize]>,
    dirichlet_values: Tensor,
    target: Option<Vec<f64>>,
}

impl Problem {
    pub fn new(mesh: Mesh, target: Option<Vec<f64>>) -> Result<Self, TrainError> {
        let operators = FemOperators::assemble(&mesh)?;
        Self::with_operators(mesh, &operators, target)
    }

    pub fn with_operators(
        mesh: Mesh,
        operators: &FemOperators,
        target: Option<Vec<f64>>,
    ) -> Result<Self, TrainError> {
        let n = mesh.num_nodes();
        if let Some(t) = &target {
            if t.len() != n {
                return Err(TrainError::Fem(FemError::DimensionMismatch {
                    expected: n,
                    found: t.len(),
                }));
            }
        }
        let graph = MeshGraph::from_mesh(&mesh)?;
        let features = NodeFeatures::from_mesh(&mesh);
        let prescribed = mesh.dirichlet_values();
        let dirichlet: Vec<usize> = (0..n).filter(|&i| prescribed[i].is_some()).collect();
        let values: Vec<f64> = dirichlet.iter().filter_map(|&i| prescribed[i]).collect();
        let residual = operators.residual.clone();
        Ok(Problem {
            interior: residual.interior().into(),
            residual: Arc::new(residual),
            graph,
            features,
            dirichlet: dirichlet.into(),
            dirichlet_values: Tensor::column(values),
            target,
            mesh,
        })
    }

    pub fn mesh(&self) -> &Mesh {
        &self.mesh
    }

    pub fn graph(&self) -> &MeshGraph {
        &self.graph
    }

    pub fn features(&self) -> &NodeFeatures {
        &self.features
    }

    pub fn residual(&self) -> &ResidualOperator {
        &self.residual
    }

    pub fn target(&self) -> Option<&[f64]> {
        self.target.as_deref()
    }

    pub fn num_nodes(&self) -> usize {
        self.mesh.num_nodes()
    }

    fn require_target(&self) -> Result<&[f64], TrainError> {
        self.target()
            .ok_or_else(|| TrainError::MissingInput("a target solution is required".into()))
    }

    fn shared_residual(&self) -> SharedOperator {
        self.residual.clone()
    }
}

/// Weighted value of each loss term; inactive terms are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub mae: f64,
    pub spatial: f64,
    pub autodiff: f64,
    pub boundary: f64,
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={:e} mae={:e} spatial={:e} autodiff={:e} boundary={:e}",
            self.total, self.mae, self.spatial, self.autodiff, self.boundary
        )
    }
}

pub struct Loss<'t> {
    pub total: Var<'t>,
    pub terms: LossBreakdown,
}

/// Builds the variant's loss for `prediction` (`N x 1`).
///
/// `features` must be a leaf of the same tape when the variant uses the
/// autodiff residual, since that term differentiates the prediction with
/// respect to the coordinate columns.
pub fn compute_loss<'t>(
    config: &TrainConfig,
    problem: &Problem,
    features: Var<'t>,
    prediction: Var<'t>,
) -> Result<Loss<'t>, TrainError> {
    let tape = prediction.tape();
    let n = problem.num_nodes();
    if prediction.shape() != (n, 1) {
        return Err(TrainError::Model(ModelError::SizeMismatch(format!(
            "prediction {:?} for {n} nodes",
            prediction.shape()
        ))));
    }
    let w = config.weights;
    let mut parts: Vec<Var<'t>> = Vec::new();
    let mut terms = LossBreakdown::default();
    let mut push = |weight: f64, v: Var<'t>, slot: &mut f64| {
        let v = v.scale(weight);
        *slot = v.item();
        parts.push(v);
    };
    match config.variant.loss {
        LossKind::Mae | LossKind::MaePlusSpatial => {
            let target = tape.constant(Tensor::column(problem.require_target()?.to_vec()));
            if w.mae > 0.0 {
                push(w.mae, prediction.sub(target)?.abs().mean(), &mut terms.mae);
            }
            if config.variant.loss == LossKind::MaePlusSpatial && w.spatial > 0.0 {
                let r = tape.external_linear(&problem.shared_residual(), prediction, false)?;
                push(w.spatial, r.square().mean(), &mut terms.spatial);
            }
        }
        LossKind::AutodiffResidual => {
            if w.autodiff > 0.0 {
                let lap = input_laplacian(features, prediction, &COORD_COLUMNS)?;
                let interior = lap.gather_rows(&problem.interior)?;
                push(w.autodiff, interior.square().mean(), &mut terms.autodiff);
            }
            if w.boundary > 0.0 {
                let bc = tape.constant(problem.dirichlet_values.clone());
                let on_patch = prediction.gather_rows(&problem.dirichlet)?;
                push(w.boundary, on_patch.sub(bc)?.abs().mean(), &mut terms.boundary);
            }
        }
    }
    let mut total = parts
        .first()
        .copied()
        .ok_or_else(|| TrainError::InvalidConfig("no active loss term".into()))?;
    for &p in &parts[1..] {
        total = total.add(p)?;
    }
    terms.total = total.item();
    Ok(Loss { total, terms })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub terms: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub history: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str = "epoch,total,mae_term,spatial_term,autodiff_term,boundary_term";

pub fn write_history(mut out: impl Write, history: &[EpochRecord]) -> std::io::Result<()> {
    writeln!(out, "{HISTORY_HEADER}")?;
    for r in history {
        let t = r.terms;
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e}",
            r.epoch, t.total, t.mae, t.spatial, t.autodiff, t.boundary
        )?;
    }
    Ok(())
}

fn loss_on_tape<'t>(
    tape: &'t Tape,
    config: &TrainConfig,
    arch: &Architecture,
    problem: &Problem,
    params: &ParamSet,
) -> Result<(Loss<'t>, Vec<Var<'t>>), TrainError> {
    let x = if config.variant.loss == LossKind::AutodiffResidual {
        tape.leaf(problem.features.tensor().clone())
    } else {
        tape.constant(problem.features.tensor().clone())
    };
    let bound = params.bind(tape);
    let prediction = arch.forward(&problem.graph, x, &bound)?;
    Ok((compute_loss(config, problem, x, prediction)?, bound.vars()))
}

/// Loss and parameter gradients at `params`, evaluated on a fresh tape.
pub fn loss_and_gradients(
    config: &TrainConfig,
    problem: &Problem,
    params: &ParamSet,
) -> Result<(LossBreakdown, Vec<Tensor>), TrainError> {
    let tape = Tape::new();
    let (loss, vars) = loss_on_tape(&tape, config, &config.architecture(), problem, params)?;
    let grads = tape.backward(loss.total, &vars, false)?;
    Ok((
        loss.terms,
        grads.iter().map(|g| g.value().as_ref().clone()).collect(),
    ))
}

/// Full-batch Adam training from the seeded initialization.
pub fn train(config: &TrainConfig, problem: &Problem) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if config.variant.loss != LossKind::AutodiffResidual {
        problem.require_target()?;
    }
    let arch = config.architecture();
    let mut params = arch.init_params(config.seed)?;
    let mut adam = Adam::new(config.adam, &params);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let tape = Tape::new();
        let (loss, vars) = loss_on_tape(&tape, config, &arch, problem, &params)?;
        let terms = loss.terms;
        if !terms.total.is_finite() {
            return Err(TrainError::NonFinite { epoch, terms });
        }
        let grads: Vec<Tensor> = tape
            .backward(loss.total, &vars, false)?
            .iter()
            .map(|g| g.value().as_ref().clone())
            .collect();
        adam.step(&mut params, &grads)?;
        history.push(EpochRecord { epoch, terms });
    }
    Ok(TrainOutcome { params, history })
}

/// What to score: a network or a fixed nodal field.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Model {
        architecture: &'a Architecture,
        params: &'a ParamSet,
    },
    Field(&'a [f64]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Mean `|R u|` over interior nodes.
    pub spatial_residual: f64,
    /// Mean `|u - u*|` over all nodes.
    pub mae: f64,
    /// Mean `|input Laplacian|` over interior nodes; `None` for fields.
    pub autodiff_residual: Option<f64>,
}

pub fn predict(
    architecture: &Architecture,
    params: &ParamSet,
    problem: &Problem,
) -> Result<Vec<f64>, TrainError> {
    let tape = Tape::new();
    let x = tape.constant(problem.features.tensor().clone());
    let y = architecture.forward(&problem.graph, x, &params.bind(&tape))?;
    Ok(y.value().data().to_vec())
}

/// Input-space Laplacian of the network output at every node.
pub fn autodiff_laplacian(
    architecture: &Architecture,
    params: &ParamSet,
    problem: &Problem,
) -> Result<Vec<f64>, TrainError> {
    let tape = Tape::new();
    let x = tape.leaf(problem.features.tensor().clone());
    let y = architecture.forward(&problem.graph, x, &params.bind(&tape))?;
    let lap = input_laplacian(x, y, &COORD_COLUMNS)?;
    Ok(lap.value().data().to_vec())
}

fn mean_abs(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len();
    v.map(f64::abs).sum::<f64>() / n as f64
}

pub fn evaluate(predictor: Predictor<'_>, problem: &Problem) -> Result<Metrics, TrainError> {
    let target = problem.require_target()?;
    let (values, autodiff) = match predictor {
        Predictor::Model {
            architecture,
            params,
        } => {
            let values = predict(architecture, params, problem)?;
            let lap = autodiff_laplacian(architecture, params, problem)?;
            let interior = mean_abs(problem.interior.iter().map(|&i| lap[i]));
            (values, Some(interior))
        }
        Predictor::Field(values) => {
            if values.len() != problem.num_nodes() {
                return Err(TrainError::Fem(FemError::DimensionMismatch {
                    expected: problem.num_nodes(),
                    found: values.len(),
                }));
            }
            (values.to_vec(), None)
        }
    };
    let residual = problem.residual.apply(&values)?;
    Ok(Metrics {
        spatial_residual: mean_abs(residual.into_iter()),
        mae: mean_abs(values.iter().zip(target).map(|(u, t)| u - t)),
        autodiff_residual: autodiff,
    })
}
