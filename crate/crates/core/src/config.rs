//! Experiment configuration.
//!
//! A config is one JSON object; unknown keys are rejected at every level.
//!
//! ```json
//! {
//!   "seed": 0,
//!   "dataset": { "name": "toy2d", "toy_n": 400 },
//!   "model": { "hidden": [32, 32] },
//!   "training": { "method": "ibp-ex", "epsilon": 6.0, "epochs": 200 },
//!   "eval": { "rcs": false, "grid_resolution": 71 },
//!   "output_dir": "runs/toy-ibp"
//! }
//! ```
//!
//! Only `dataset.name` is required. The root `seed` drives every random
//! stream; `training.seed` and `theory.seed` may be omitted or must equal
//! it. The config hash is the first 8 bytes (big-endian) of the SHA-256 of
//! the canonical JSON (sorted keys, no whitespace) of the fully defaulted
//! config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DecoySizes;
use crate::error::{Error, Result};
use crate::model::MlpSpec;
use crate::theory::TheoryConfig;
use crate::train::TrainingConfig;

pub const DATA_DIR_ENV: &str = "MLX_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetName {
    Toy2d,
    DecoyMnist,
}

impl DatasetName {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetName::Toy2d => "toy2d",
            DatasetName::DecoyMnist => "decoy-mnist",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: DatasetName,
    /// Toy-2D training size (validation and test get a quarter each).
    #[serde(default = "default_toy_n")]
    pub toy_n: usize,
    #[serde(default)]
    pub decoy_sizes: DecoySizes,
    /// Directory holding the four MNIST IDX files (optionally gzipped).
    #[serde(default = "default_raw_dir")]
    pub raw_dir: PathBuf,
    /// Where dataset caches live; `MLX_DATA_DIR` takes precedence.
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
}

fn default_toy_n() -> usize {
    400
}

fn default_raw_dir() -> PathBuf {
    PathBuf::from("data/mnist")
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from("data/cache")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden widths; empty means the dataset default (`[32, 32]` for
    /// toy-2D, `[512, 512]` for Decoy-MNIST).
    pub hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Use the irrelevance masks. RCS and saliency statistics need them.
    pub masks: bool,
    pub rcs: bool,
    pub rcs_sigma: f64,
    pub saliency: bool,
    pub grid_resolution: usize,
    pub grid_x1: (f64, f64),
    pub grid_x2: (f64, f64),
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            masks: true,
            rcs: true,
            rcs_sigma: 0.25,
            saliency: true,
            grid_resolution: 71,
            grid_x1: (-6.0, 6.0),
            grid_x2: (-6.0, 6.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub theory: TheoryConfig,
    /// Training-block overrides, one sweep row each.
    #[serde(default)]
    pub sweep: Vec<serde_json::Map<String, serde_json::Value>>,
    /// Worker threads for `sweep`; 0 means one per available core.
    #[serde(default)]
    pub sweep_workers: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn canonical_hash<T: Serialize>(value: &T) -> Result<u64> {
    let canonical = serde_json::to_string(&serde_json::to_value(value)?)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(u64::from_be_bytes(digest[..8].try_into().expect("8-byte prefix")))
}

pub fn hash_hex(hash: u64) -> String {
    format!("{hash:016x}")
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.normalize()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Replaces the root seed and the block seeds that mirror it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.training.seed = seed;
        self.theory.seed = seed;
        self
    }

    fn normalize(&mut self) -> Result<()> {
        if self.training.seed != 0 && self.training.seed != self.seed {
            return Err(Error::Config(format!(
                "training.seed ({}) must be omitted or equal the root seed ({})",
                self.training.seed, self.seed
            )));
        }
        if self.theory.seed != 0 && self.theory.seed != self.seed {
            return Err(Error::Config(format!(
                "theory.seed ({}) must be omitted or equal the root seed ({})",
                self.theory.seed, self.seed
            )));
        }
        self.training.seed = self.seed;
        self.theory.seed = self.seed;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        self.model_spec()?;
        let e = &self.eval;
        if !e.masks && e.rcs {
            return Err(Error::Config("eval.rcs needs eval.masks = true".into()));
        }
        if !e.masks && e.saliency {
            return Err(Error::Config("eval.saliency needs eval.masks = true".into()));
        }
        if !(e.rcs_sigma >= 0.0) {
            return Err(Error::Config("eval.rcs_sigma must be >= 0".into()));
        }
        if e.grid_resolution < 2 {
            return Err(Error::Config("eval.grid_resolution must be >= 2".into()));
        }
        if !(e.grid_x1.0 < e.grid_x1.1 && e.grid_x2.0 < e.grid_x2.1) {
            return Err(Error::Config("eval.grid_x1 and eval.grid_x2 must be increasing ranges".into()));
        }
        if self.dataset.name == DatasetName::Toy2d && self.dataset.toy_n < 100 {
            return Err(Error::Config("dataset.toy_n must be >= 100".into()));
        }
        for (i, row) in self.sweep.iter().enumerate() {
            self.sweep_training(row)
                .map_err(|e| Error::Config(format!("sweep[{i}]: {e}")))?;
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<MlpSpec> {
        let (input, classes, default_hidden) = match self.dataset.name {
            DatasetName::Toy2d => (2, 2, vec![32, 32]),
            DatasetName::DecoyMnist => (2352, 10, vec![512, 512]),
        };
        let hidden = if self.model.hidden.is_empty() {
            default_hidden
        } else {
            self.model.hidden.clone()
        };
        MlpSpec::new(input, &hidden, classes).map_err(|e| Error::Config(format!("model: {e}")))
    }

    /// The training block with one sweep row's overrides applied.
    pub fn sweep_training(&self, overrides: &serde_json::Map<String, serde_json::Value>) -> Result<TrainingConfig> {
        let mut value = serde_json::to_value(&self.training)?;
        let obj = value.as_object_mut().expect("training block serializes to an object");
        for (k, v) in overrides {
            if k == "seed" {
                return Err(Error::Config("sweep rows cannot override the seed".into()));
            }
            obj.insert(k.clone(), v.clone());
        }
        let cfg: TrainingConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn config_hash(&self) -> Result<u64> {
        canonical_hash(self)
    }

    /// Hash of everything that determines a trained checkpoint.
    pub fn training_hash(&self) -> Result<u64> {
        canonical_hash(&(self.seed, &self.dataset, self.model_spec()?, &self.training))
    }

    /// Hash of everything that determines the dataset.
    pub fn data_hash(&self) -> Result<u64> {
        let d = &self.dataset;
        match d.name {
            DatasetName::Toy2d => canonical_hash(&(self.seed, d.name, d.toy_n)),
            DatasetName::DecoyMnist => canonical_hash(&(self.seed, d.name, d.decoy_sizes)),
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.dataset.cache_dir.clone(),
        }
    }

    pub fn cache_path(&self) -> Result<PathBuf> {
        Ok(self.cache_dir().join(format!(
            "{}-{}.mlxd",
            self.dataset.name.as_str(),
            hash_hex(self.data_hash()?)
        )))
    }

    /// `# mlx config_hash=<hex> seed=<n>`
    pub fn header(&self) -> Result<String> {
        Ok(format!("mlx config_hash={} seed={}", hash_hex(self.config_hash()?), self.seed))
    }
}
