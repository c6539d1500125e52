//! Experiment config file (TOML).
//!
//! ```toml
//! [task]
//! recipe = "low-rank-shift"   # gaussian-blobs | rotated-base | low-rank-shift
//! seed = 0
//! widths = [16, 16, 4]        # input, hidden..., classes
//! n_train = 256
//! n_test = 256
//! shift_rank = 4
//! shift_scale = 2.0
//!
//! [train]
//! m = 8                       # omit to scale the default 8 down per layer
//! r = 8
//! n_kernels = 2
//! init_std = 0.02
//! method = "karst"            # karst | kron-adapter | linear-probe
//! optimizer = "adam"          # adam | sgd
//! lr = 0.001
//! epochs = 200
//! batch_size = 32
//! seed = 0
//!
//! [output]
//! dir = "runs/default"
//! ```
//!
//! Every key is optional and takes the default shown; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{KarstError, Result};
use crate::training::{TaskSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| KarstError::Config(e.to_string()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| KarstError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// The config as JSON, with the per-layer stacking dimension actually
    /// used spelled out under `resolved`.
    pub fn resolved_json(&self) -> serde_json::Value {
        let layer_m: Vec<usize> = self
            .task
            .widths
            .windows(2)
            .map(|w| self.train.m_for(w[0], w[1]))
            .collect();
        serde_json::json!({
            "task": self.task,
            "train": self.train,
            "output": self.output,
            "resolved": { "layer_m": layer_m },
        })
    }
}
