//! TOML run configuration with `dataset`, `net`, `train`, `mrm` and `eval`
//! sections, plus named presets.
//!
//! ```toml
//! [dataset]
//! num_classes = 4
//! samples_per_split = [2000, 400, 600]
//!
//! [net]
//! d = 40
//! num_heads = 10
//!
//! [train]
//! lr = 4e-3
//! loss_weights = { task = 1.0, scd = 1.0, cpd = 1.0, rcd = 1.0 }
//!
//! [mrm]
//! mode = "random_train"
//! p_max = 0.5
//!
//! [eval]
//! seeds = [0, 1, 2]
//! ```
//!
//! Omitted keys take their defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corruption::MissingnessSpec;
use crate::datasets::DatasetConfig;
use crate::distill::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::FusionNetConfig;
use crate::optim::AdamConfig;

/// The `[train]` section: [`TrainConfig`] without the net and corruption
/// settings, which have their own sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub eta: f64,
    pub loss_weights: LossWeights,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub ntcr_renormalize: bool,
    pub statnet_hidden: usize,
    pub statnet_layers: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            eta: t.eta,
            loss_weights: t.loss_weights,
            adam: t.adam,
            clip_norm: t.clip_norm,
            ntcr_renormalize: t.ntcr_renormalize,
            statnet_hidden: t.statnet_hidden,
            statnet_layers: t.statnet_layers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Corruption seeds for the robustness sweep.
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seeds: vec![0, 1, 2],
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub net: FusionNetConfig,
    pub train: TrainSection,
    pub mrm: MissingnessSpec,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetConfig::default(),
            net: FusionNetConfig::default(),
            train: TrainSection::default(),
            mrm: MissingnessSpec::random_train(0.5),
            eval: EvalConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 4] = ["default", "mosi-like", "mosei-like", "iemocap-like"];

impl RunConfig {
    /// Named hyperparameter bundles. The `*-like` presets copy the published
    /// learning rate, batch size and margin for each benchmark onto the
    /// synthetic generator.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let (k, lr, batch, eta) = match name {
            "default" => return Ok(c),
            "mosi-like" => (2, 4e-3, 64, 1.2),
            "mosei-like" => (2, 2e-3, 32, 1.0),
            "iemocap-like" => (4, 4e-3, 64, 1.4),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        c.dataset.num_classes = k;
        c.net.num_classes = k;
        c.net.d = 40;
        c.net.num_heads = 10;
        c.train.lr = lr;
        c.train.batch_size = batch;
        c.train.eta = eta;
        Ok(c)
    }

    pub fn from_toml_str(s: &str, origin: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Parse {
            file: origin.into(),
            line: e
                .span()
                .map_or(0, |sp| s[..sp.start.min(s.len())].matches('\n').count() + 1),
            msg: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&s, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Sets the run seed everywhere a seed is consumed.
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.train.seed = seed;
    }

    /// Keeps dataset and net dimensions consistent, then validates.
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.net.num_classes != self.dataset.num_classes {
            return Err(Error::InvalidConfig(format!(
                "net.num_classes = {} but dataset.num_classes = {}",
                self.net.num_classes, self.dataset.num_classes
            )));
        }
        if self.net.input_dims != self.dataset.feature_dims {
            return Err(Error::InvalidConfig(format!(
                "net.input_dims = {:?} but dataset.feature_dims = {:?}",
                self.net.input_dims, self.dataset.feature_dims
            )));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::InvalidConfig("eval.seeds must not be empty".into()));
        }
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            eta: t.eta,
            loss_weights: t.loss_weights,
            adam: t.adam,
            clip_norm: t.clip_norm,
            ntcr_renormalize: t.ntcr_renormalize,
            statnet_hidden: t.statnet_hidden,
            statnet_layers: t.statnet_layers,
            net: self.net.clone(),
            mrm: self.mrm.clone(),
        }
    }
}
