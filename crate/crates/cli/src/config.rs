use std::path::{Path, PathBuf};

use meshpinn::models::{Activation, Aggregation};
use meshpinn::training::{AdamConfig, LossWeights, TrainConfig, Variant};
use serde::Deserialize;

use crate::error::CliError;

fn default_epochs() -> usize {
    2000
}

fn default_lr() -> f64 {
    1e-3
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

fn one() -> f64 {
    1.0
}

fn default_w_spatial() -> f64 {
    0.01
}

fn default_n() -> usize {
    4
}

fn default_amplitude() -> f64 {
    0.25
}

fn default_tol() -> f64 {
    1e-10
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Contents of a `--config` file. Relative paths are taken relative to the
/// directory holding the file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "one")]
    pub w_mae: f64,
    #[serde(default = "default_w_spatial")]
    pub w_spatial: f64,
    #[serde(default = "one")]
    pub w_autodiff: f64,
    #[serde(default = "one")]
    pub w_boundary: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub aggregation: Aggregation,
    /// Used to generate the mesh when `mesh` is absent.
    #[serde(default = "default_n")]
    pub nx: usize,
    #[serde(default = "default_n")]
    pub ny: usize,
    #[serde(default = "default_n")]
    pub nz: usize,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Mesh JSON file.
    #[serde(default)]
    pub mesh: Option<PathBuf>,
    /// Target solution JSON array; solved for when absent.
    #[serde(default)]
    pub target: Option<PathBuf>,
    #[serde(default = "default_tol")]
    pub reference_tol: f64,
    /// Defaults to `checkpoint.json` in the output directory.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut config.output_dir);
        for p in [&mut config.mesh, &mut config.target, &mut config.checkpoint]
            .into_iter()
            .flatten()
        {
            rebase(p);
        }
        Ok(config)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            variant: self.variant,
            epochs: self.epochs,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
            weights: LossWeights {
                mae: self.w_mae,
                spatial: self.w_spatial,
                autodiff: self.w_autodiff,
                boundary: self.w_boundary,
            },
            seed: self.seed,
            activation: self.activation,
            aggregation: self.aggregation,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("checkpoint.json"))
    }
}
