use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-limit, limit]`.
    Uniform { limit: f64 },
    Zeros,
}

impl Init {
    /// Glorot/Xavier uniform bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(fan_in: usize, fan_out: usize) -> Self {
        Init::Uniform {
            limit: (6.0 / (fan_in + fan_out) as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

/// Ordered, named trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    seed: u64,
    entries: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    seed: u64,
    tensors: Vec<CheckpointTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointTensor {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

const CHECKPOINT_FORMAT: &str = "meshpinn-checkpoint-v1";

impl ParamSet {
    /// Draws every tensor in order from one ChaCha stream seeded with `seed`.
    pub fn init(shapes: &[ParamShape], seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries: Vec<(String, Tensor)> = Vec::with_capacity(shapes.len());
        for shape in shapes {
            if shape.rows == 0 || shape.cols == 0 {
                return Err(ModelError::ZeroWidth(shape.name.clone()));
            }
            if entries.iter().any(|(n, _)| *n == shape.name) {
                return Err(ModelError::DuplicateParam(shape.name.clone()));
            }
            let data = match shape.init {
                Init::Uniform { limit } => (0..shape.rows * shape.cols)
                    .map(|_| rng.gen_range(-limit..=limit))
                    .collect(),
                Init::Zeros => vec![0.0; shape.rows * shape.cols],
            };
            entries.push((shape.name.clone(), Tensor::new(shape.rows, shape.cols, data)));
        }
        Ok(ParamSet { seed, entries })
    }

    pub fn from_entries(seed: u64, entries: Vec<(String, Tensor)>) -> Self {
        ParamSet { seed, entries }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Same names and shapes, all values zero.
    pub fn zeroed(&self) -> ParamSet {
        ParamSet {
            seed: self.seed,
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.rows(), t.cols())))
                .collect(),
        }
    }

    /// Places every tensor on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        BoundParams {
            vars: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), tape.leaf(t.clone())))
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            seed: self.seed,
            tensors: self
                .entries
                .iter()
                .map(|(n, t)| CheckpointTensor {
                    name: n.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                    values: t.data().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&file).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!(
                "unknown checkpoint format {:?}",
                file.format
            )));
        }
        let mut entries = Vec::with_capacity(file.tensors.len());
        for t in file.tensors {
            if t.values.len() != t.rows * t.cols {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {} declares {}x{} but holds {} values",
                    t.name,
                    t.rows,
                    t.cols,
                    t.values.len()
                )));
            }
            entries.push((t.name, Tensor::new(t.rows, t.cols, t.values)));
        }
        Ok(ParamSet {
            seed: file.seed,
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json()).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        Self::from_json(&text)
    }
}

/// A [`ParamSet`] placed on a tape, in the same order.
#[derive(Debug, Clone)]
pub struct BoundParams<'t> {
    vars: Vec<(String, Var<'t>)>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>, ModelError> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        self.vars.iter().map(|(_, v)| *v).collect()
    }

    /// Swaps in a different variable for `name`; used to probe one tensor.
    pub fn replace(&mut self, name: &str, var: Var<'t>) -> Result<(), ModelError> {
        let slot = self
            .vars
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        slot.1 = var;
        Ok(())
    }
}
