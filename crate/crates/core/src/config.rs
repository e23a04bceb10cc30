//! Run configuration: one TOML file, every key optional.
//!
//! ```toml
//! seed = 0
//! epochs = 30
//! batch_size = 32
//! thresholds = [0.5, 1.0]
//!
//! [model]            # group_tokens (K), frames (T), activities, actions,
//!                    # gct_heads, gct_ffn_hidden, outlier_mode = "token" | "background"
//! [model.backbone]   # image_size, patch_size, channels, layers, model_dim, heads,
//!                    # ffn_hidden, prompt_mode = "none" | "shallow" | "deep",
//!                    # prompt_count, frozen
//! [loss]             # lambda_m, lambda_c, tau, aux_layers
//! [optimizer]        # lr, beta1, beta2, eps, weight_decay
//! [data]             # synthetic generator: clips, actors, groups, singletons, ...
//! [paths]            # dataset, out, features (optional precomputed patch grids)
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::PromptMode;
use crate::data::SyntheticConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::Error;

/// File name of the effective configuration written into output directories.
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub features: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            out: PathBuf::from("runs/default"),
            features: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// IoU thresholds reported by evaluation.
    pub thresholds: Vec<f64>,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: AdamWConfig,
    pub data: SyntheticConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 32,
            thresholds: vec![0.5, 1.0],
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: AdamWConfig::default(),
            data: SyntheticConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), Error> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.model.validate()?;
        self.loss.validate()?;
        self.data.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::Config(format!("IoU threshold {t} is outside (0, 1]")));
        }
        if self.data.activities != self.model.activities || self.data.actions != self.model.actions {
            return Err(Error::Config(
                "data.activities/actions must equal model.activities/actions".into(),
            ));
        }
        Ok(())
    }

    pub fn frozen(&self) -> bool {
        self.model.backbone.frozen
    }

    pub fn prompt_mode(&self) -> PromptMode {
        self.model.backbone.prompt_mode
    }
}
