use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, PretrainOptions};
use crate::datagen::{MixtureSpec, SyntheticSpec};
use crate::encoders::{DEFAULT_CATEGORY_ALPHA, DEFAULT_STYLE_ALPHA, GENERATION_ALPHA};
use crate::error::{Error, Result};
use crate::losses::LossConfig;

use super::optim::AdamConfig;

pub const SEED_ENV: &str = "CCLIP_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Cross-entropy plus adversarial confusion on labeled samples.
    #[default]
    Labeled,
    /// Triplet losses on decomposed captions.
    Unlabeled,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(TrainMode::Labeled),
            "unlabeled" => Ok(TrainMode::Unlabeled),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected labeled or unlabeled)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Residual ratio used to build generation conditions.
    pub alpha: f64,
    pub tokens: usize,
    pub width: usize,
    pub samples_per_prompt: usize,
    pub mixture: MixtureSpec,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            steps: 3000,
            batch_size: 128,
            lr: 3e-3,
            alpha: GENERATION_ALPHA,
            tokens: 1,
            width: 32,
            samples_per_prompt: 200,
            mixture: MixtureSpec::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Training samples kept per (style, category) cell; all when absent.
    pub shots: Option<usize>,
    pub optimizer: AdamConfig,
    pub loss: LossConfig,
    pub alpha_style: f64,
    pub alpha_category: f64,
    pub data: SyntheticSpec,
    pub backbone: BackboneConfig,
    pub pretrain_contrastive: bool,
    pub pretrain: PretrainOptions,
    pub diffusion: DiffusionTrainConfig,
    /// Wall-clock times make metrics files differ between runs, so they are
    /// written as 0 unless this is set.
    pub record_wall_time: bool,
    pub paths: Paths,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Labeled,
            seed: 0,
            epochs: 30,
            batch_size: 32,
            shots: None,
            optimizer: AdamConfig::default(),
            loss: LossConfig::default(),
            alpha_style: DEFAULT_STYLE_ALPHA,
            alpha_category: DEFAULT_CATEGORY_ALPHA,
            data: SyntheticSpec::default(),
            backbone: BackboneConfig::default(),
            pretrain_contrastive: false,
            pretrain: PretrainOptions::default(),
            diffusion: DiffusionTrainConfig::default(),
            record_wall_time: false,
            paths: Paths::default(),
        }
    }
}

fn check_alpha(name: &str, a: f64) -> Result<()> {
    if (0.0..=1.0).contains(&a) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {a} outside [0, 1]")))
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Applies `CCLIP_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.shots == Some(0) {
            return Err(Error::Config("shots must be >= 1".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config("invalid Adam settings".into()));
        }
        self.loss.validate()?;
        check_alpha("alpha_style", self.alpha_style)?;
        check_alpha("alpha_category", self.alpha_category)?;
        check_alpha("diffusion.alpha", self.diffusion.alpha)?;
        self.data.validate()?;
        let d = &self.diffusion;
        if d.batch_size == 0 || d.tokens == 0 || d.width == 0 || d.lr.is_nan() || d.lr <= 0.0 {
            return Err(Error::Config("invalid diffusion settings".into()));
        }
        if self.backbone.dim < self.data.num_styles() + self.data.num_categories() {
            return Err(Error::Config("backbone.dim too small for the number of classes".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let c = TrainConfig::default();
        assert_eq!(c.epochs, 30);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.optimizer.lr, 1e-3);
        assert_eq!(c.loss.lambda1, 0.2);
        assert_eq!(c.loss.lambda2, 0.3);
        assert_eq!(c.diffusion.alpha, 0.1);
        assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
        let partial = TrainConfig::from_json(r#"{"epochs": 3, "loss": {"lambda1": 0.0}}"#).unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.loss.lambda1, 0.0);
        assert_eq!(partial.loss.lambda2, 0.3);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::from_json(r#"{"epoch": 3}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"loss": {"margin": 1}}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"alpha_style": 1.5}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"mode": "semi"}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"loss": {"adversarial_mode": "maximize"}}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"batch_size": 0}"#).is_err());
        assert!(TrainConfig::from_json("not json").is_err());
    }
}
