//! Run configuration, read from TOML. Every section and key is optional;
//! missing values take the defaults below.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, CorpusParams, DataFormat, Dataset, SplitFractions, Splits};
use crate::error::{Error, Result};
use crate::pruning::PruneParams;
use crate::quantizer::QuantConfig;
use crate::regularizers::RegularizerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Image file; the built-in digits corpus is generated when unset.
    pub path: Option<PathBuf>,
    pub format: DataFormat,
    pub shape: [usize; 3],
    pub num_classes: usize,
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub corpus: CorpusParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        let f = SplitFractions::default();
        Self {
            path: None,
            format: DataFormat::Csv,
            shape: [1, 8, 8],
            num_classes: 10,
            train: f.train,
            val: f.val,
            test: f.test,
            corpus: CorpusParams::default(),
        }
    }
}

impl DataConfig {
    pub fn fractions(&self) -> SplitFractions {
        SplitFractions {
            train: self.train,
            val: self.val,
            test: self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Conv(8,3×3) → ReLU → Pool2 → Conv(16,3×3) → ReLU → Pool2 → FC.
    #[default]
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Architecture,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::Desk,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_initial: u32,
    pub epochs_regularized: u32,
    pub epochs_finetune: u32,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_initial: 20,
            epochs_regularized: 20,
            epochs_finetune: 10,
            lr: 0.05,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FaultConfig {
    pub stuck_off: f64,
    pub drift_r: f64,
    pub drift_fraction: f64,
    pub aging_fraction: f64,
    pub aging_levels: u32,
    /// Repetitions per grid point for stochastic sweep axes.
    pub reps: usize,
}

impl Default for FaultConfig {
    fn default() -> Self {
        Self {
            stuck_off: 0.0,
            drift_r: 0.0,
            drift_fraction: 0.3,
            aging_fraction: 0.3,
            aging_levels: 4,
            reps: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub regularizer: RegularizerConfig,
    pub quant: QuantConfig,
    pub prune: PruneParams,
    pub faults: FaultConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.fractions().validate()?;
        if self.data.num_classes == 0 || self.data.shape.contains(&0) {
            return Err(Error::Config("data.shape and data.num_classes must be positive".into()));
        }
        if !(self.train.lr > 0.0) || !self.train.lr.is_finite() {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.train.lr)));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        self.quant.validate()?;
        self.regularizer.validate(self.quant.bits)?;
        self.prune.validate()?;
        let f = &self.faults;
        for (name, v) in [
            ("stuck_off", f.stuck_off),
            ("drift_fraction", f.drift_fraction),
            ("aging_fraction", f.aging_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("faults.{name} must be in [0, 1], got {v}")));
            }
        }
        if !(f.drift_r >= 0.0) {
            return Err(Error::Config(format!("faults.drift_r must be >= 0, got {}", f.drift_r)));
        }
        if f.reps == 0 {
            return Err(Error::Config("faults.reps must be positive".into()));
        }
        Ok(())
    }

    /// Loads (or generates) the dataset and splits it by the run seed.
    pub fn load_splits(&self) -> Result<Splits> {
        let dataset = self.load_dataset()?;
        data::split(&dataset, self.data.fractions(), self.seed)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.data.path {
            Some(path) => data::load_dataset(path, self.data.format, self.data.shape, self.data.num_classes),
            None => {
                if self.data.shape != [1, 8, 8] || self.data.num_classes != 10 {
                    return Err(Error::Config(
                        "the built-in corpus is 1x8x8 with 10 classes; set data.path for other shapes".into(),
                    ));
                }
                Ok(data::generate_digits(self.data.corpus, self.seed))
            }
        }
    }
}
