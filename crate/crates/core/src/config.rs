//! Declarative run configuration (TOML) with sections
//! `dataset`, `generator`, `train`, `saliency`, `refine` and `eval`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ImageShape;
use crate::dataset::SplitOptions;
use crate::error::{Result, UapError};
use crate::generator::GeneratorConfig;
use crate::refine::RefineConfig;
use crate::saliency::DEFAULT_BINARIZE_FRACTION;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Target model id in the registry.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub registry: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Timestamp written into UAPF headers; current time when absent.
    #[serde(default)]
    pub created_unix: Option<u64>,
    #[serde(default)]
    pub dataset: DatasetSection,
    pub generator: GeneratorSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub saliency: SaliencySection,
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Folder-per-class image root.
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// Previously written dataset manifest; takes the place of `root`.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "defaults::train_per_class")]
    pub train_per_class: usize,
    #[serde(default)]
    pub validation_cap: Option<usize>,
    #[serde(default)]
    pub validation_seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            root: None,
            manifest: None,
            split_seed: 0,
            train_per_class: defaults::train_per_class(),
            validation_cap: None,
            validation_seed: 0,
        }
    }
}

impl DatasetSection {
    pub fn split_options(&self) -> SplitOptions {
        SplitOptions {
            split_seed: self.split_seed,
            train_per_class: self.train_per_class,
            validation_cap: self.validation_cap,
            validation_seed: self.validation_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    #[serde(default = "defaults::depth")]
    pub depth: usize,
    #[serde(default = "defaults::base_channels")]
    pub base_channels: usize,
    pub noise_seed: u64,
    pub init_seed: u64,
    /// Must equal `train.epsilon` when given.
    #[serde(default)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaliencySection {
    /// Overrides the target's default saliency layer.
    #[serde(default)]
    pub layer: Option<String>,
    #[serde(default = "defaults::fraction")]
    pub fraction: f64,
}

impl Default for SaliencySection {
    fn default() -> Self {
        Self {
            layer: None,
            fraction: DEFAULT_BINARIZE_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "defaults::eval_batch")]
    pub batch_size: usize,
    /// Extra registry models to attack with the same perturbation.
    #[serde(default)]
    pub transfer_models: Vec<String>,
    #[serde(default = "defaults::noise_seeds")]
    pub noise_seeds: Vec<u64>,
    #[serde(default)]
    pub sweep_norms: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            batch_size: defaults::eval_batch(),
            transfer_models: Vec::new(),
            noise_seeds: defaults::noise_seeds(),
            sweep_norms: Vec::new(),
        }
    }
}

mod defaults {
    pub fn train_per_class() -> usize {
        50
    }
    pub fn depth() -> usize {
        3
    }
    pub fn base_channels() -> usize {
        32
    }
    pub fn fraction() -> f64 {
        crate::saliency::DEFAULT_BINARIZE_FRACTION
    }
    pub fn eval_batch() -> usize {
        crate::eval::DEFAULT_EVAL_BATCH
    }
    pub fn noise_seeds() -> Vec<u64> {
        vec![0, 1, 2, 3, 4]
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| UapError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.refine.validate()?;
        if let Some(e) = self.generator.epsilon {
            if e != self.train.epsilon {
                return Err(UapError::InvalidConfig(format!(
                    "generator.epsilon = {e} conflicts with train.epsilon = {}",
                    self.train.epsilon
                )));
            }
        }
        if !(self.saliency.fraction > 0.0 && self.saliency.fraction < 1.0) {
            return Err(UapError::InvalidConfig(format!(
                "saliency.fraction must be in (0, 1), got {}",
                self.saliency.fraction
            )));
        }
        if self.dataset.root.is_some() && self.dataset.manifest.is_some() {
            return Err(UapError::InvalidConfig(
                "dataset.root and dataset.manifest are mutually exclusive".into(),
            ));
        }
        if self.eval.batch_size == 0 {
            return Err(UapError::InvalidConfig("eval.batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn generator_config(&self, image_shape: ImageShape) -> GeneratorConfig {
        GeneratorConfig {
            depth: self.generator.depth,
            base_channels: self.generator.base_channels,
            epsilon: self.train.epsilon,
            noise_seed: self.generator.noise_seed,
            init_seed: self.generator.init_seed,
            image_shape,
        }
    }

    /// Fills `slot` from a command-line value; a different value already in
    /// the config is an error rather than a silent override.
    pub fn merge_flag<V: PartialEq + Clone + std::fmt::Debug>(
        slot: &mut Option<V>,
        flag: Option<&V>,
        name: &str,
    ) -> Result<()> {
        match (slot.as_ref(), flag) {
            (Some(a), Some(b)) if a != b => Err(UapError::InvalidConfig(format!(
                "--{name} {b:?} conflicts with config value {a:?}"
            ))),
            (None, Some(b)) => {
                *slot = Some(b.clone());
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is always serializable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        model = "cnn_a"
        [generator]
        noise_seed = 1
        init_seed = 2
        [train]
        shuffle_seed = 3
    "#;

    #[test]
    fn defaults_follow_the_published_protocol() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.train.learning_rate, 0.001);
        assert_eq!(c.train.weight_decay, 0.001);
        assert_eq!(c.train.epochs, 50);
        assert_eq!(c.train.epsilon, 10.0);
        assert_eq!(c.refine.alpha, 1.2);
        assert_eq!(c.refine.beta, 0.8);
        assert!(c.refine.reproject);
        assert_eq!(c.dataset.train_per_class, 50);
        assert_eq!(c.saliency.fraction, 0.5);
    }

    #[test]
    fn seeds_are_mandatory_and_unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[generator]\ninit_seed=1\n[train]\nshuffle_seed=1").is_err());
        let extra = format!("{MINIMAL}\n[refine]\ngamma = 2.0\n");
        assert!(RunConfig::from_toml(&extra).is_err());
    }

    #[test]
    fn conflicting_epsilons_and_flags_are_errors() {
        let bad = MINIMAL.replace("init_seed = 2", "init_seed = 2\nepsilon = 8.0");
        assert!(RunConfig::from_toml(&bad).is_err());
        let mut slot = Some("cnn_a".to_owned());
        assert!(RunConfig::merge_flag(&mut slot, Some(&"cnn_b".to_owned()), "model").is_err());
        assert!(RunConfig::merge_flag(&mut slot, Some(&"cnn_a".to_owned()), "model").is_ok());
        let mut empty: Option<String> = None;
        RunConfig::merge_flag(&mut empty, Some(&"x".to_owned()), "model").unwrap();
        assert_eq!(empty.as_deref(), Some("x"));
    }

    #[test]
    fn shipped_desk_config_is_valid() {
        let cfg = RunConfig::from_toml(include_str!("../../../configs/desk.toml")).unwrap();
        assert_eq!(cfg.model.as_deref(), Some("cnn_a"));
        assert_eq!(cfg.generator.depth, 1);
        assert_eq!(cfg.train.optimizer, crate::nn::OptimizerKind::Adam);
    }
}
