//! Run configuration, loaded from JSON. Every section and key is optional;
//! missing keys take the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_json, write_json, SyntheticSpec};
use crate::error::{Error, Result};
use crate::pdn::PdnConfig;
use crate::ssn::SsnConfig;

pub const SEED_ENV: &str = "SEGTAD_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Epochs from this index on run at `lr / 10`.
    pub lr_drop_epoch: usize,
    pub epochs: usize,
    /// Switches the segmentation loss on or off.
    pub use_seg_loss: bool,
    pub lambda_det: f64,
    pub lambda_aux: f64,
    pub lambda_reg: f64,
    pub seed: u64,
    /// Videos per optimizer step.
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            lr_drop_epoch: 7,
            epochs: 15,
            use_seg_loss: true,
            lambda_det: 1.0,
            lambda_aux: 1.0,
            lambda_reg: 1e-4,
            seed: 0,
            batch: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub nms_sigma: f64,
    pub keep: usize,
    /// Classes per video taken from a class-score file.
    pub top_classes: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            nms_sigma: 0.5,
            keep: 100,
            top_classes: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Temporal length T every feature sequence is rescaled to.
    pub snippets: usize,
    pub ssn: SsnConfig,
    pub pdn: PdnConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub synthetic: SyntheticSpec,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            snippets: 1000,
            ssn: SsnConfig::default(),
            pdn: PdnConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl Config {
    /// Small model sized for the synthetic desk-scale data.
    pub fn desk() -> Self {
        let synthetic = SyntheticSpec::default();
        Self {
            snippets: synthetic.snippets,
            ssn: SsnConfig {
                layers: 3,
                in_channels: synthetic.channels,
                hidden: 32,
                dilations: vec![1, 2, 4, 8],
                snippet_k: 8,
                num_classes: synthetic.num_classes,
                ..Default::default()
            },
            pdn: PdnConfig {
                eta: 8,
                m0: 16,
                k: 4,
                align_bins: 16,
                ..Default::default()
            },
            train: TrainConfig {
                lr: 1e-3,
                epochs: 100,
                lr_drop_epoch: 80,
                ..Default::default()
            },
            infer: InferConfig::default(),
            synthetic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ssn.validate()?;
        self.pdn.validate()?;
        let t = &self.train;
        if t.epochs < 1 || t.batch < 1 {
            return Err(Error::Config("train: epochs and batch must be >= 1".into()));
        }
        if !(t.lr > 0.0) {
            return Err(Error::Config("train: lr must be > 0".into()));
        }
        if [t.lambda_det, t.lambda_aux, t.lambda_reg].iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("train: loss weights must be >= 0".into()));
        }
        let i = &self.infer;
        if !(i.nms_sigma > 0.0) || i.keep < 1 || i.top_classes < 1 {
            return Err(Error::Config("infer: nms_sigma > 0, keep >= 1, top_classes >= 1".into()));
        }
        if self.snippets % self.ssn.downscale() != 0 {
            return Err(Error::Config(format!(
                "snippets {} must be divisible by 2^layers = {}",
                self.snippets,
                self.ssn.downscale()
            )));
        }
        if self.pdn.eta > self.snippets {
            return Err(Error::Config("pdn.eta exceeds snippets".into()));
        }
        Ok(())
    }

    /// Sets both the training and the synthetic-data seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synthetic.seed = seed;
    }

    /// Applies `SEGTAD_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            self.set_seed(seed);
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config file, applies the environment override and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let mut c: Self = read_json(path)?;
        c.apply_env()?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}
