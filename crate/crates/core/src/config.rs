//! Experiment configuration as strict TOML with `[model]`, `[loss]`,
//! `[train]` and `[data]` sections. Unknown keys are rejected; missing keys
//! take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{ImageEncoderConfig, ModelConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Minimum corpus frequency for a word to enter the vocabulary.
    pub min_word_freq: usize,
    /// Fraction of samples in the training split.
    pub split_ratio: f64,
    /// Seed of the train/val shuffle.
    pub split_seed: u64,
    pub toy_images: usize,
    pub toy_categories: usize,
    /// VQA annotation file, relative to the data directory.
    pub annotations: String,
    /// VQA question file, relative to the data directory.
    pub questions: String,
    /// Image directory relative to the data directory. Ignored when
    /// `features` is set.
    pub image_dir: String,
    /// Optional JSON map from image id to feature vector, relative to the
    /// data directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            min_word_freq: 1,
            split_ratio: 0.8,
            split_seed: 0,
            toy_images: 50,
            toy_categories: 3,
            annotations: "annotations.json".into(),
            questions: "questions.json".into(),
            image_dir: "images".into(),
            features: None,
        }
    }
}

impl DataConfig {
    pub fn annotations_path(&self, root: &Path) -> PathBuf {
        root.join(&self.annotations)
    }

    pub fn questions_path(&self, root: &Path) -> PathBuf {
        root.join(&self.questions)
    }

    pub fn image_dir_path(&self, root: &Path) -> PathBuf {
        root.join(&self.image_dir)
    }

    pub fn features_path(&self, root: &Path) -> Option<PathBuf> {
        self.features.as_ref().map(|f| root.join(f))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::ConfigParse(msg) => Error::ConfigParse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if !(d.split_ratio > 0.0 && d.split_ratio < 1.0) {
            return Err(Error::Config("data.split_ratio must lie in (0, 1)".into()));
        }
        if d.min_word_freq == 0 {
            return Err(Error::Config("data.min_word_freq must be at least 1".into()));
        }
        Ok(())
    }

    /// Side length of square input images, or `None` for feature input.
    pub fn image_size(&self) -> Option<usize> {
        match &self.model.image_encoder {
            ImageEncoderConfig::Conv { size, .. } => Some(*size),
            ImageEncoderConfig::Features { .. } => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_carry_reference_hyperparameters() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        let v: toml::Table = toml::from_str(&text).unwrap();
        let loss = v["loss"].as_table().unwrap();
        let expected = [
            ("image", 1.0),
            ("category", 2.0),
            ("question", 3.0),
            ("consistency", 2.0),
            ("center", 3.0),
            ("bayes", 3.0),
            ("reg", 2.0),
        ];
        for (k, want) in expected {
            assert_eq!(loss[k].as_float(), Some(want), "loss.{k}");
        }
        assert_eq!(v["model"]["latent_dim"].as_integer(), Some(64));
        assert_eq!(v["train"]["learning_rate"].as_float(), Some(1e-3));
        assert_eq!(v["train"]["epochs"].as_integer(), Some(15));
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml_string().unwrap(), text);
    }

    #[test]
    fn unknown_keys_rejected() {
        for bad in [
            "[train]\nepoch = 3\n",
            "[model]\nlatent = 3\n",
            "[loss]\nlambda_q = 1.0\n",
            "[extra]\n",
            "[model.image_encoder]\nkind = \"features\"\ndim = 4\nsize = 3\n",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml_str(bad), Err(Error::ConfigParse(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn partial_file_fills_defaults_and_validates() {
        let cfg = ExperimentConfig::from_toml_str("[train]\nepochs = 3\nseed = 7\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert!(matches!(
            ExperimentConfig::from_toml_str("[data]\nsplit_ratio = 1.5\n"),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::from_toml_str("[loss]\ncenter = -1.0\n").is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_values_round_trip(
            lr in 1e-6f64..1.0,
            w in proptest::array::uniform7(0.0f64..10.0),
            seed in 0..=i64::MAX as u64,
            d in 1usize..256,
            clip in proptest::option::of(0.1f64..10.0),
            features in proptest::option::of("[a-z]{1,8}\\.json"),
        ) {
            let mut cfg = ExperimentConfig::default();
            cfg.train.learning_rate = lr;
            cfg.train.seed = seed;
            cfg.train.clip_grad_norm = clip;
            cfg.model.latent_dim = d;
            cfg.loss = LossWeights {
                image: w[0],
                category: w[1],
                question: w[2],
                consistency: w[3],
                center: w[4],
                bayes: w[5],
                reg: w[6],
            };
            cfg.data.features = features;
            let text = cfg.to_toml_string().unwrap();
            prop_assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        }
    }
}
