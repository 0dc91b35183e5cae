//! TOML run configuration. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, DatasetName, Split};
use crate::error::{Error, Result};
use crate::model::{preset, LayerSpec, SampleShape};
use crate::train::{ModelConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Joint,
    /// Stage-wise ascending-layer baseline.
    Ascending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "defaults::dataset")]
    pub dataset: DatasetName,
    /// Dataset directory; falls back to `$VLQ_DATA_DIR`.
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// Pad-4 random crop and horizontal flip on CIFAR-10 training batches.
    #[serde(default = "defaults::yes")]
    pub augment: bool,
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    #[serde(default = "defaults::synthetic_train")]
    pub synthetic_train: usize,
    #[serde(default = "defaults::synthetic_test")]
    pub synthetic_test: usize,
    #[serde(default = "defaults::synthetic_classes")]
    pub synthetic_classes: usize,
    #[serde(default = "defaults::synthetic_noise")]
    pub synthetic_noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Named architecture (`mnist_small`, `cifar_small`).
    #[serde(default)]
    pub arch: Option<String>,
    /// Explicit layer list, used with `input` instead of `arch`.
    #[serde(default)]
    pub layers: Option<Vec<LayerSpec>>,
    #[serde(default)]
    pub input: Option<SampleShape>,
    #[serde(default = "defaults::basic_bits")]
    pub basic_bits: u32,
    #[serde(default = "defaults::n")]
    pub n: usize,
    #[serde(default = "defaults::yes")]
    pub compensation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub mode: TrainMode,
    #[serde(default)]
    pub data: DataConfig,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
}

mod defaults {
    use crate::data::DatasetName;

    pub fn dataset() -> DatasetName {
        DatasetName::Mnist
    }
    pub fn yes() -> bool {
        true
    }
    pub fn synthetic_train() -> usize {
        1000
    }
    pub fn synthetic_test() -> usize {
        200
    }
    pub fn synthetic_classes() -> usize {
        10
    }
    pub fn synthetic_noise() -> f64 {
        1.0
    }
    pub fn basic_bits() -> u32 {
        2
    }
    pub fn n() -> usize {
        2
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: defaults::dataset(),
            root: None,
            augment: true,
            train_limit: None,
            test_limit: None,
            synthetic_train: defaults::synthetic_train(),
            synthetic_test: defaults::synthetic_test(),
            synthetic_classes: defaults::synthetic_classes(),
            synthetic_noise: defaults::synthetic_noise(),
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let (input, layers) = match (&self.arch, &self.layers) {
            (Some(name), None) => {
                let (shape, layers) =
                    preset(name).ok_or_else(|| Error::Config(format!("unknown architecture {name:?}")))?;
                if self.input.is_some_and(|i| i != shape) {
                    return Err(Error::Config(format!("architecture {name} takes input {shape:?}")));
                }
                (shape, layers)
            }
            (None, Some(layers)) => {
                let input = self.input.ok_or_else(|| Error::Config("model.layers needs model.input".into()))?;
                (input, layers.clone())
            }
            _ => return Err(Error::Config("set exactly one of model.arch and model.layers".into())),
        };
        Ok(ModelConfig { input, layers, basic_bits: self.basic_bits, n: self.n, compensation: self.compensation })
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.resolve()?;
        if self.model.basic_bits < 2 || self.model.basic_bits + self.model.n as u32 > 16 {
            return Err(Error::Config("need 2 <= basic_bits and basic_bits + n <= 16".into()));
        }
        if self.data.dataset == DatasetName::Synthetic
            && (self.data.synthetic_train == 0 || self.data.synthetic_classes < 2 || self.data.synthetic_classes > 256)
        {
            return Err(Error::Config("synthetic data needs samples and 2..=256 classes".into()));
        }
        if self.data.train_limit == Some(0) || self.data.test_limit == Some(0) {
            return Err(Error::Config("dataset limits must be positive".into()));
        }
        Ok(())
    }

    pub fn load_split(&self, split: Split) -> Result<Dataset> {
        let mut d = match self.data.dataset {
            DatasetName::Synthetic => {
                let count = match split {
                    Split::Train => self.data.synthetic_train,
                    Split::Test => self.data.synthetic_test,
                };
                let shape = self.model.resolve()?.input;
                data::synthetic(
                    count,
                    shape,
                    self.data.synthetic_classes,
                    self.data.synthetic_noise,
                    self.train.seed,
                    split,
                )
            }
            name => data::load_dataset(name, split, &data::data_root(self.data.root.as_deref())?, self.data.augment)?,
        };
        let limit = match split {
            Split::Train => self.data.train_limit,
            Split::Test => self.data.test_limit,
        };
        if let Some(l) = limit {
            d.truncate(l);
        }
        Ok(d)
    }
}
