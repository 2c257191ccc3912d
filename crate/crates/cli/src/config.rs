use std::path::Path;

use sdc_core::synthcells::SynthSpec;
use sdc_core::toymodel::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: SynthSpec,
    pub test: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: SynthSpec::default_train(),
            test: SynthSpec::default_test(),
        }
    }
}

impl DataConfig {
    /// Seeds the training split with `seed` and the test split with `seed + 1`.
    pub fn reseed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.test.seed = seed.wrapping_add(1);
    }
}

/// The error-bound simulation instance: `f(x) = slope·x` on `[0, c_star]`,
/// with `c_star` split into `parts` that each stay within `c_max`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitBoundConfig {
    pub slope: f64,
    pub c_star: f64,
    pub parts: Vec<f64>,
    pub c_max: f64,
    pub trials: usize,
}

impl Default for SplitBoundConfig {
    fn default() -> Self {
        Self {
            slope: 0.01,
            c_star: 20.0,
            parts: vec![10.0, 10.0],
            c_max: 10.0,
            trials: 100_000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    /// Random fine grids in the division-bound sweep.
    pub instances: usize,
    pub grid_side: usize,
    pub seed: u64,
    pub split: SplitBoundConfig,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            instances: 1000,
            grid_side: 8,
            seed: 0,
            split: SplitBoundConfig::default(),
        }
    }
}

/// Every subcommand's configuration, as printed by `--print-default-config`.
#[derive(Debug, Default, Serialize)]
pub struct AllDefaults {
    pub gen_data: DataConfig,
    pub train: TrainConfig,
    pub verify_theory: TheoryConfig,
}

/// Reads `path` as JSON, or returns the defaults when no path is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}
