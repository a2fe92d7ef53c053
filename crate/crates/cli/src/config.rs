//! Resolved run configuration: JSON file first, command-line flags on top.

use crate::error::{CliError, CliResult};
use leuq_core::inverse_opt::{InverseRoute, InverseTarget};
use leuq_core::model::{ModelConfig, RolloutMode};
use leuq_core::pde::SolverConfig;
use leuq_core::training::TrainRunConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `train.bin`, `test.bin` and `manifest.json`.
    pub dir: Option<PathBuf>,
    pub train: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            train: 8,
            test: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: RolloutMode,
    pub horizon: usize,
    /// Use only the first `members` checkpoints; all when unset.
    pub members: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: RolloutMode::Autoregressive,
            horizon: 10,
            members: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvertConfig {
    pub route: InverseRoute,
    pub target: InverseTarget,
    pub iterations: usize,
    pub lr: f64,
    /// Test trajectory providing observations and ground truth.
    pub trajectory: usize,
    /// Snapshot index of the last frame of U⁰; defaults to the end of the
    /// first history window.
    pub start: Option<usize>,
    pub k_start: usize,
    pub k_end: usize,
    pub static_param: Option<Vec<f64>>,
}

impl Default for InvertConfig {
    fn default() -> Self {
        InvertConfig {
            route: InverseRoute::Latent,
            target: InverseTarget::InitialState,
            iterations: 500,
            lr: 1e-2,
            trajectory: 0,
            start: None,
            k_start: 1,
            k_end: 10,
            static_param: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub solver: SolverConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainRunConfig,
    pub eval: EvalConfig,
    pub invert: InvertConfig,
    /// Directory of `member_k.ckpt` files for `eval` and `invert`.
    pub ensemble_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Writes `config.json` into `dir`.
    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::config(e.to_string()))?;
        let path = dir.join("config.json");
        std::fs::write(&path, text).map_err(|e| CliError::io(path, e))
    }
}

/// Sets `slot` when the flag was given.
pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}
