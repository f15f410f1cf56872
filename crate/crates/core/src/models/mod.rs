//! Surrogate networks built on the tape.
//!
//! * [`Architecture::Piecn`]: two EdgeConv layers over the mesh graph.
//! * [`Architecture::Pinn`]: a pointwise MLP on the same node features.
//!
//! Both read the five node features `(x, y, z, bc_value, bc_mask)` and emit
//! one scalar per node.

mod params;

pub use params::{BoundParams, Init, ParamSet, ParamShape};

use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Reduce, Segments, TapeError, Tensor, Var};
use crate::mesh::{EdgeList, Mesh};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("duplicate parameter {0:?}")]
    DuplicateParam(String),
    #[error("parameter {0:?} has a zero-sized dimension")]
    ZeroWidth(String),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub const NUM_FEATURES: usize = 5;
pub const COORD_COLUMNS: [usize; 3] = [0, 1, 2];
pub const DEFAULT_WIDTH: usize = 128;

/// Per-node inputs `(x, y, z, bc_value, bc_mask)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures(Tensor);

impl NodeFeatures {
    pub fn from_mesh(mesh: &Mesh) -> Self {
        let prescribed = mesh.dirichlet_values();
        let mut t = Tensor::zeros(mesh.num_nodes(), NUM_FEATURES);
        for (i, (p, bc)) in mesh.nodes().iter().zip(prescribed).enumerate() {
            t.set(i, 0, p[0]);
            t.set(i, 1, p[1]);
            t.set(i, 2, p[2]);
            if let Some(v) = bc {
                t.set(i, 3, v);
                t.set(i, 4, 1.0);
            }
        }
        NodeFeatures(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn num_nodes(&self) -> usize {
        self.0.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: Var<'_>) -> Var<'_> {
        match self {
            Activation::Relu => v.relu(),
            Activation::Tanh => v.tanh(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

impl From<Aggregation> for Reduce {
    fn from(a: Aggregation) -> Reduce {
        match a {
            Aggregation::Max => Reduce::Max,
            Aggregation::Mean => Reduce::Mean,
        }
    }
}

/// Incoming-edge view of the mesh graph: message `k` travels from
/// `neighbors[k]` to `centers[k]`, and `centers` is sorted.
#[derive(Debug, Clone)]
pub struct MeshGraph {
    num_nodes: usize,
    centers: Rc<[usize]>,
    neighbors: Rc<[usize]>,
    segments: Rc<Segments>,
}

impl MeshGraph {
    pub fn from_mesh(mesh: &Mesh) -> Result<Self, ModelError> {
        Self::from_edges(mesh.num_nodes(), &mesh.extract_edges())
    }

    /// The edge list is symmetric, so the out-edges `(i, j)` of `i` name
    /// exactly its in-edges `j -> i`.
    pub fn from_edges(num_nodes: usize, edges: &EdgeList) -> Result<Self, ModelError> {
        let pairs: Vec<(usize, usize)> = edges.iter().map(|(s, t)| (t, s)).collect();
        Self::from_messages(num_nodes, &pairs)
    }

    /// Builds from `(source, target)` message pairs in any order; the
    /// relative order of messages into the same node is kept.
    pub fn from_messages(num_nodes: usize, pairs: &[(usize, usize)]) -> Result<Self, ModelError> {
        if let Some(&(s, t)) = pairs.iter().find(|&&(s, t)| s >= num_nodes || t >= num_nodes) {
            return Err(ModelError::SizeMismatch(format!(
                "edge ({s}, {t}) out of range for {num_nodes} nodes"
            )));
        }
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.sort_by_key(|&k| pairs[k].1);
        let centers: Vec<usize> = order.iter().map(|&k| pairs[k].1).collect();
        let neighbors: Vec<usize> = order.iter().map(|&k| pairs[k].0).collect();
        let segments = Segments::new(centers.clone(), num_nodes)?;
        Ok(MeshGraph {
            num_nodes,
            centers: centers.into(),
            neighbors: neighbors.into(),
            segments: Rc::new(segments),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_messages(&self) -> usize {
        self.centers.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiecnSpec {
    pub in_features: usize,
    pub width: usize,
    pub aggregation: Aggregation,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinnSpec {
    pub in_features: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Architecture {
    Piecn(PiecnSpec),
    Pinn(PinnSpec),
}

impl Architecture {
    pub fn piecn(activation: Activation) -> Self {
        Architecture::Piecn(PiecnSpec {
            in_features: NUM_FEATURES,
            width: DEFAULT_WIDTH,
            aggregation: Aggregation::Max,
            activation,
        })
    }

    pub fn pinn(activation: Activation) -> Self {
        Architecture::Pinn(PinnSpec {
            in_features: NUM_FEATURES,
            width: DEFAULT_WIDTH,
            hidden_layers: 4,
            activation,
        })
    }

    pub fn param_shapes(&self) -> Vec<ParamShape> {
        let dense = |name: &str, fan_in: usize, fan_out: usize| {
            vec![
                ParamShape {
                    name: format!("{name}.weight"),
                    rows: fan_in,
                    cols: fan_out,
                    init: Init::glorot(fan_in, fan_out),
                },
                ParamShape {
                    name: format!("{name}.bias"),
                    rows: 1,
                    cols: fan_out,
                    init: Init::Zeros,
                },
            ]
        };
        match *self {
            Architecture::Piecn(spec) => {
                let mut shapes = Vec::new();
                for (layer, f_in, f_out) in [
                    ("conv1", spec.in_features, spec.width),
                    ("conv2", spec.width, 1),
                ] {
                    // the first MLP layer acts on [x_i || x_j - x_i]; its
                    // weight is stored as the two row blocks
                    let init = Init::glorot(2 * f_in, spec.width);
                    for block in ["center", "diff"] {
                        shapes.push(ParamShape {
                            name: format!("{layer}.mlp0.weight_{block}"),
                            rows: f_in,
                            cols: spec.width,
                            init,
                        });
                    }
                    shapes.push(ParamShape {
                        name: format!("{layer}.mlp0.bias"),
                        rows: 1,
                        cols: spec.width,
                        init: Init::Zeros,
                    });
                    shapes.extend(dense(&format!("{layer}.mlp1"), spec.width, spec.width));
                    shapes.extend(dense(&format!("{layer}.mlp2"), spec.width, f_out));
                }
                shapes
            }
            Architecture::Pinn(spec) => {
                let mut shapes = dense("fc0", spec.in_features, spec.width);
                for l in 1..spec.hidden_layers {
                    shapes.extend(dense(&format!("fc{l}"), spec.width, spec.width));
                }
                shapes.extend(dense(
                    &format!("fc{}", spec.hidden_layers),
                    spec.width,
                    1,
                ));
                shapes
            }
        }
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet, ModelError> {
        if let Architecture::Pinn(spec) = self {
            if spec.hidden_layers == 0 {
                return Err(ModelError::ZeroWidth("fc0".into()));
            }
        }
        ParamSet::init(&self.param_shapes(), seed)
    }

    /// Checks that `params` holds exactly this architecture's tensors, in
    /// order and with the right shapes.
    pub fn check_params(&self, params: &ParamSet) -> Result<(), ModelError> {
        let shapes = self.param_shapes();
        if shapes.len() != params.len() {
            return Err(ModelError::SizeMismatch(format!(
                "expected {} parameter tensors, found {}",
                shapes.len(),
                params.len()
            )));
        }
        for (shape, (name, t)) in shapes.iter().zip(params.iter()) {
            if shape.name != name || (shape.rows, shape.cols) != t.shape() {
                return Err(ModelError::SizeMismatch(format!(
                    "expected {} of shape {}x{}, found {name} of shape {}x{}",
                    shape.name,
                    shape.rows,
                    shape.cols,
                    t.rows(),
                    t.cols()
                )));
            }
        }
        Ok(())
    }

    /// `N x 1` prediction. The graph is ignored by the pointwise model.
    pub fn forward<'t>(
        &self,
        graph: &MeshGraph,
        features: Var<'t>,
        params: &BoundParams<'t>,
    ) -> Result<Var<'t>, ModelError> {
        let (rows, cols) = features.shape();
        match *self {
            Architecture::Piecn(spec) => {
                if rows != graph.num_nodes() || cols != spec.in_features {
                    return Err(ModelError::SizeMismatch(format!(
                        "features {rows}x{cols} vs graph of {} nodes and {} features",
                        graph.num_nodes(),
                        spec.in_features
                    )));
                }
                let h = edgeconv_layer(graph, features, params, "conv1", spec)?;
                edgeconv_layer(graph, h, params, "conv2", spec)
            }
            Architecture::Pinn(spec) => {
                if cols != spec.in_features {
                    return Err(ModelError::SizeMismatch(format!(
                        "features have {cols} columns, model expects {}",
                        spec.in_features
                    )));
                }
                pinn_forward(features, params, spec)
            }
        }
    }
}

fn linear<'t>(
    x: Var<'t>,
    params: &BoundParams<'t>,
    name: &str,
) -> Result<Var<'t>, ModelError> {
    let w = params.get(&format!("{name}.weight"))?;
    let b = params.get(&format!("{name}.bias"))?;
    Ok(x.matmul(w)?.add_row(b)?)
}

/// One EdgeConv layer: for each message `j -> i` an MLP of
/// `[x_i || x_j - x_i]`, reduced over the incoming messages of `i`.
///
/// The first MLP layer is linear in its input, so
/// `[x_i || x_j - x_i] W = x_i (W_c - W_d) + x_j W_d` is evaluated per node
/// and then gathered per message.
pub fn edgeconv_layer<'t>(
    graph: &MeshGraph,
    x: Var<'t>,
    params: &BoundParams<'t>,
    prefix: &str,
    spec: PiecnSpec,
) -> Result<Var<'t>, ModelError> {
    let w_center = params.get(&format!("{prefix}.mlp0.weight_center"))?;
    let w_diff = params.get(&format!("{prefix}.mlp0.weight_diff"))?;
    let bias = params.get(&format!("{prefix}.mlp0.bias"))?;
    let at_center = x.matmul(w_center)?.sub(x.matmul(w_diff)?)?;
    let at_neighbor = x.matmul(w_diff)?;
    let h = at_center
        .gather_rows(&graph.centers)?
        .add(at_neighbor.gather_rows(&graph.neighbors)?)?
        .add_row(bias)?;
    let h = spec.activation.apply(h);
    let h = spec.activation.apply(linear(h, params, &format!("{prefix}.mlp1"))?);
    let messages = linear(h, params, &format!("{prefix}.mlp2"))?;
    Ok(messages.segment_reduce(spec.aggregation.into(), &graph.segments)?)
}

fn pinn_forward<'t>(
    x: Var<'t>,
    params: &BoundParams<'t>,
    spec: PinnSpec,
) -> Result<Var<'t>, ModelError> {
    let mut h = x;
    for l in 0..spec.hidden_layers {
        h = spec.activation.apply(linear(h, params, &format!("fc{l}"))?);
    }
    linear(h, params, &format!("fc{}", spec.hidden_layers))
}

#[cfg(test)]
mod tests;
