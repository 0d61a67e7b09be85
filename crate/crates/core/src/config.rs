//! Experiment configuration documents.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::PartitionSpec;
use crate::error::{Error, Result};
use crate::federation::{DropoutModel, StrategyConfig};
use crate::nn::ModelChoice;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// IDX files; `dir` is relative to the data root (default `fashion-mnist`).
    FashionMnist {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
    },
    /// Binary batches; `dir` is relative to the data root (default
    /// `cifar-10-batches-bin`).
    Cifar10 {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
    },
    /// Gaussian blobs generated from the experiment seed.
    Synthetic {
        classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default = "default_separation")]
        separation: f64,
    },
}

fn default_separation() -> f64 {
    4.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: ModelChoice,
    /// Embedding width of the MLP (the CNNs use 128).
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default)]
    pub classifier_bias: bool,
}

fn default_hidden() -> usize {
    128
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub partition: PartitionSpec,
    pub dropout: DropoutModel,
    pub strategy: StrategyConfig,
    pub rounds: usize,
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    /// Trailing rounds summarized by the stability statistics.
    #[serde(default = "default_window")]
    pub stability_window: usize,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_window() -> usize {
    50
}

impl ExperimentConfig {
    /// Parse and validate; errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("field `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn classes(&self) -> usize {
        match self.dataset {
            DatasetSpec::FashionMnist { .. } | DatasetSpec::Cifar10 { .. } => 10,
            DatasetSpec::Synthetic { classes, .. } => classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSpec::Synthetic {
            classes,
            dim,
            train_per_class,
            test_per_class,
            separation,
        } = self.dataset
        {
            if classes < 2 || dim == 0 || train_per_class == 0 || test_per_class == 0 {
                return Err(Error::Config(
                    "dataset: synthetic data needs classes >= 2 and positive dim, train_per_class and test_per_class".into(),
                ));
            }
            if !(separation > 0.0 && separation.is_finite()) {
                return Err(Error::Config(format!("dataset.separation = {separation} must be positive")));
            }
        }
        if self.model.hidden == 0 {
            return Err(Error::Config("model.hidden must be positive".into()));
        }
        self.partition.validate(self.classes())?;
        self.dropout.validate()?;
        let clusters = self.partition.clusters().len();
        if self.dropout.cluster_p.len() > clusters {
            return Err(Error::Config(format!(
                "dropout.cluster_p has {} entries but the partition defines {clusters} clusters",
                self.dropout.cluster_p.len()
            )));
        }
        self.strategy.validate()?;
        if self.stability_window == 0 {
            return Err(Error::Config("stability_window must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "dataset": {"kind": "synthetic", "classes": 4, "dim": 6, "train_per_class": 100, "test_per_class": 20},
        "model": {"arch": "mlp", "hidden": 16},
        "partition": {"mode": "pathological", "clients": 3, "classes_per_client": 2, "samples_per_client": 40},
        "dropout": {"kind": "independent", "p": 0.5},
        "strategy": {"name": "rebafl"},
        "rounds": 5,
        "seed": 1
    }"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.strategy.batch_size, 50);
        assert_eq!(cfg.strategy.weight_decay, 5e-4);
        assert_eq!(cfg.precision, Precision::F32);
        assert_eq!(cfg.stability_window, 50);
    }

    #[test]
    fn round_trip() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_field() {
        let bad = MINIMAL.replace("\"p\": 0.5", "\"p\": 1.5");
        let e = ExperimentConfig::from_json(&bad).unwrap_err().to_string();
        assert!(e.contains("dropout.p"), "{e}");
        let bad = MINIMAL.replace("\"rebafl\"", "\"sgd\"");
        let e = ExperimentConfig::from_json(&bad).unwrap_err().to_string();
        assert!(e.contains("strategy.name"), "{e}");
        let bad = MINIMAL.replace("\"rounds\": 5,", "\"rounds\": 5, \"extra\": 1,");
        assert!(ExperimentConfig::from_json(&bad).is_err());
        let bad = MINIMAL.replace("\"samples_per_client\": 40", "\"samples_per_client\": 41");
        let e = ExperimentConfig::from_json(&bad).unwrap_err().to_string();
        assert!(e.contains("samples_per_client"), "{e}");
    }
}
