//! The run configuration file.
//!
//! ```toml
//! [data]                 # synthetic generator; every key optional
//! seed = 0
//! label_count = 5
//! feature_dim = 32
//! noise_std = 0.2
//! prototype_norm = 1.0
//! prototype_seed = 1592590337
//! # prototypes = [[...], ...]      label_count rows of feature_dim values
//! # cooccurrence = [[...], ...]    required unless label_count = 5
//! exclusive = [0]
//! train_size = 2000
//! val_size = 500
//! test_size = 500
//!
//! [encoder]
//! hidden = [64, 64]
//! embedding_dim = 64
//! # seed = 0                       defaults to train.seed
//!
//! [train]
//! regime = "ml2plus"             # contrastive | triplet | ml2 | ml2plus
//! batch_size = 10
//! iterations = 3000
//! learning_rate = 0.01
//! momentum = 0.9
//! weight_decay = 1e-4
//! lr_decay = 0.1
//! decay_period = 1000
//! margin = 0.2
//! eval_every = 100
//! seed = 0
//! pretrain = false
//! pretrain_iterations = 1000
//! pretrain_batch_size = 32
//! # hard_class_k = 3
//! threads = 1
//!
//! [eval]
//! # seed = 0                       defaults to train.seed
//! probe = true
//!
//! [paths]
//! # data_dir = "data"
//! # run_dir = "runs/ml2plus"
//! ```
//!
//! Unknown keys are rejected. Command-line flags override file values.

use std::path::{Path, PathBuf};

use ml2::dataset::{random_prototypes, SyntheticSpec, DEFAULT_PROTOTYPE_SEED, NORMAL_LABEL};
use ml2::trainer::TrainConfig;
use ml2::EncoderConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prototype_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prototype_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prototypes: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cooccurrence: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exclusive: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_size: Option<usize>,
}

impl DataConfig {
    /// Overlays the set keys on the default generator.
    pub fn to_spec(&self) -> Result<SyntheticSpec, CliError> {
        let base = SyntheticSpec::desk_default(self.seed);
        let l = self.label_count.unwrap_or(base.label_count);
        let w = self.feature_dim.unwrap_or(base.feature_dim);
        let prototypes = match &self.prototypes {
            Some(p) => p.clone(),
            None => random_prototypes(
                l,
                w,
                self.prototype_norm.unwrap_or(1.0),
                self.prototype_seed.unwrap_or(DEFAULT_PROTOTYPE_SEED),
            ),
        };
        let cooccurrence = match &self.cooccurrence {
            Some(c) => c.clone(),
            None if l == base.label_count => base.cooccurrence,
            None => {
                return Err(CliError::Config(format!(
                    "data.cooccurrence: required when label_count is {l}"
                )))
            }
        };
        let spec = SyntheticSpec {
            label_count: l,
            feature_dim: w,
            prototypes,
            noise_std: self.noise_std.unwrap_or(base.noise_std),
            cooccurrence,
            exclusive: self.exclusive.clone().unwrap_or_else(|| vec![NORMAL_LABEL]),
            train_size: self.train_size.unwrap_or(base.train_size),
            val_size: self.val_size.unwrap_or(base.val_size),
            test_size: self.test_size.unwrap_or(base.test_size),
            seed: self.seed,
        };
        spec.validate().map_err(|e| match e {
            ml2::Error::Spec(m) => CliError::Config(format!("data.{m}")),
            other => CliError::Config(other.to_string()),
        })?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = EncoderConfig::new(1);
        Self {
            hidden: d.hidden,
            embedding_dim: d.embedding_dim,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Fit a normal-vs-abnormal logistic probe on the training split.
    pub probe: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { seed: None, probe: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub encoder: EncoderSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))
    }

    pub fn encoder_config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden: self.encoder.hidden.clone(),
            embedding_dim: self.encoder.embedding_dim,
            label_heads: 0,
            seed: self.encoder.seed.unwrap_or(self.train.seed),
        }
    }

    pub fn eval_seed(&self) -> u64 {
        self.eval.seed.unwrap_or(self.train.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.data.to_spec().unwrap(), SyntheticSpec::desk_default(0));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1", "[train]\nlearnig_rate = 0.1", "[data]\nnoise = 0.1", "[nope]"] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(matches!(err, CliError::Config(_)), "{text}");
        }
    }

    #[test]
    fn bad_cooccurrence_names_key() {
        let mut d = DataConfig::default();
        let mut c = SyntheticSpec::desk_default(0).cooccurrence;
        c[1][2] = 1.5;
        d.cooccurrence = Some(c);
        let err = d.to_spec().unwrap_err().to_string();
        assert!(err.contains("cooccurrence[1][2]"), "{err}");
    }

    #[test]
    fn other_label_counts_need_a_table() {
        let d = DataConfig {
            label_count: Some(3),
            ..DataConfig::default()
        };
        assert!(d.to_spec().unwrap_err().to_string().contains("data.cooccurrence"));
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.train.hard_class_k = Some(2);
        c.train.pretrain = true;
        c.data.noise_std = Some(0.3);
        c.paths.run_dir = Some("runs/x".into());
        let back = RunConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn seeds_follow_training_seed() {
        let mut c = RunConfig::default();
        c.train.seed = 9;
        assert_eq!(c.encoder_config(4).seed, 9);
        assert_eq!(c.eval_seed(), 9);
        c.encoder.seed = Some(1);
        assert_eq!(c.encoder_config(4).seed, 1);
    }
}
