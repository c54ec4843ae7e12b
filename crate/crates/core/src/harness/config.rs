use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::kernel::{AdamConfig, Precision};
use crate::npos::NposConfig;
use crate::regularizer::VorConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    /// Inputs already are features; only heads are trained.
    Identity,
    /// Frozen transformer with the shared prefix prompt.
    #[default]
    Prompted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase", tag = "kind")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Two embedding files; classes are shuffled by the run seed and chunked into tasks.
    Embeddings {
        train: String,
        test: String,
        classes_per_task: usize,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Standard deviation of the Gaussian weight init.
    pub init_std: f64,
    pub bias: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            init_std: 0.02,
            bias: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub epochs: usize,
    /// Share of each task's epochs spent in the outlier-regularized, head-only phase.
    pub reg_fraction: f64,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// When false the regularized phase does not exist and every epoch trains prompt and head.
    pub regularizer: bool,
    pub vor: VorConfig,
    pub npos: NposConfig,
    pub mode: EncoderMode,
    pub encoder: EncoderConfig,
    /// Seed of the frozen random backbone, shared by every run seed.
    pub backbone_seed: u64,
    pub head: HeadConfig,
    pub data: DataSource,
    pub seeds: Vec<u64>,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epochs: 20,
            reg_fraction: 0.2,
            batch_size: 128,
            optimizer: AdamConfig::default(),
            regularizer: true,
            vor: VorConfig::default(),
            npos: NposConfig::default(),
            mode: EncoderMode::Prompted,
            encoder: EncoderConfig::default(),
            backbone_seed: 0,
            head: HeadConfig::default(),
            data: DataSource::default(),
            seeds: (0..5).collect(),
            precision: Precision::F64,
        }
    }
}

impl RunConfig {
    pub fn reg_epochs(&self) -> usize {
        if !self.regularizer {
            return 0;
        }
        (self.reg_fraction * self.epochs as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.reg_fraction) {
            return Err(Error::config(
                "reg_fraction",
                format!("must lie in [0, 1], got {}", self.reg_fraction),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) {
            return Err(Error::config("optimizer.lr", format!("must be > 0, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.beta1) {
            return Err(Error::config("optimizer.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optimizer.beta2", "must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be > 0"));
        }
        self.vor.validate()?;
        if self.mode == EncoderMode::Prompted {
            self.encoder.validate()?;
        }
        if !(self.head.init_std >= 0.0) {
            return Err(Error::config("head.init_std", "must be >= 0"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        match &self.data {
            DataSource::Synthetic(spec) => {
                spec.validate()?;
                if self.mode == EncoderMode::Prompted && spec.dim != self.encoder.input_dim {
                    return Err(Error::config(
                        "encoder.input_dim",
                        format!("is {}, but synthetic data has dim {}", self.encoder.input_dim, spec.dim),
                    ));
                }
                if self.reg_epochs() > 0 {
                    self.npos.validate(spec.classes_per_task)?;
                    self.npos
                        .check_samples(spec.train_per_class * spec.classes_per_task, spec.classes_per_task)
                        .map_err(|e| Error::config("npos", e.to_string()))?;
                }
            }
            DataSource::Embeddings { classes_per_task, .. } => {
                if *classes_per_task == 0 {
                    return Err(Error::config("data.classes_per_task", "must be >= 1"));
                }
                if self.reg_epochs() > 0 {
                    self.npos.validate(*classes_per_task)?;
                }
            }
        }
        Ok(())
    }
}
