//! Experiment configuration: JSON with defaults for every field.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::Profile;
use crate::interpret::{Method, Reduction};
use crate::runtime::ChannelModel;
use crate::train::{Phase, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Synth {
        class_count: usize,
        per_class: usize,
        image_size: usize,
        profile: Profile,
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CuiConfig {
    pub method: Method,
    pub reduction: Reduction,
    /// Only images of these classes enter the CUI statistics.
    pub class_subset: Option<Vec<usize>>,
    pub class_balanced: bool,
}

impl Default for CuiConfig {
    fn default() -> Self {
        Self {
            method: Method::GradCam,
            reduction: Reduction::Sum,
            class_subset: None,
            class_balanced: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Candidates {
    /// Local maxima of the CUI curve, best first.
    AutoCui {
        #[serde(default)]
        max: Option<usize>,
    },
    /// Layers whose successor shrinks the representation.
    AutoCde,
    Explicit {
        layers: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfigs {
    pub base: TrainConfig,
    pub ae: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for PhaseConfigs {
    fn default() -> Self {
        Self {
            base: TrainConfig::base(),
            ae: TrainConfig::ae(),
            finetune: TrainConfig::finetune(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub trials: usize,
    /// `None` draws `min(800, validation size)` images per trial.
    pub sample_size: Option<usize>,
    pub seed: u64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            trials: crate::stats::DEFAULT_TRIALS,
            sample_size: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Preset name or inline architecture text.
    pub architecture: String,
    pub dataset: DatasetSource,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Seeds model init, data splitting, shuffling and bottleneck init.
    pub seed: u64,
    pub cui: CuiConfig,
    pub candidates: Candidates,
    pub compression_rate: f64,
    pub train: PhaseConfigs,
    pub channel: ChannelModel,
    pub stats: StatsConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            architecture: "vgg-micro".into(),
            dataset: DatasetSource::Synth {
                class_count: 8,
                per_class: 60,
                image_size: 16,
                profile: Profile::Mixed,
                seed: 0,
            },
            val_fraction: 0.25,
            test_fraction: 0.25,
            seed: 0,
            cui: CuiConfig::default(),
            candidates: Candidates::AutoCui { max: None },
            compression_rate: 0.9,
            train: PhaseConfigs::default(),
            channel: ChannelModel::default(),
            stats: StatsConfig::default(),
            output_dir: PathBuf::from("isplit-out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Checks value ranges and that referenced input files exist.
    pub fn validate(&self) -> Result<(), String> {
        match &self.dataset {
            DatasetSource::Synth {
                class_count, per_class, ..
            } => {
                if *class_count < 2 {
                    return Err(format!("dataset.class_count must be at least 2, got {class_count}"));
                }
                if *per_class == 0 {
                    return Err("dataset.per_class must be positive".into());
                }
            }
            DatasetSource::Idx { images, labels } => {
                for p in [images, labels] {
                    if !p.is_file() {
                        return Err(format!("dataset file {} does not exist", p.display()));
                    }
                }
            }
        }
        let fractions = [self.val_fraction, self.test_fraction];
        if fractions.iter().any(|f| !(0.0..1.0).contains(f)) || self.val_fraction <= 0.0 {
            return Err(format!(
                "val_fraction must be in (0,1) and test_fraction in [0,1), got {} and {}",
                self.val_fraction, self.test_fraction
            ));
        }
        if self.val_fraction + self.test_fraction >= 1.0 {
            return Err("val_fraction + test_fraction must leave training data".into());
        }
        if !(self.compression_rate > 0.0 && self.compression_rate < 1.0) {
            return Err(format!("compression_rate must be in (0,1), got {}", self.compression_rate));
        }
        if let Candidates::Explicit { layers } = &self.candidates {
            if layers.is_empty() {
                return Err("explicit candidates need at least one layer".into());
            }
        }
        if matches!(self.candidates, Candidates::AutoCui { max: Some(0) }) {
            return Err("candidates.max must be positive".into());
        }
        for (name, cfg, phase) in [
            ("base", &self.train.base, Phase::Base),
            ("ae", &self.train.ae, Phase::Ae),
            ("finetune", &self.train.finetune, Phase::Finetune),
        ] {
            if cfg.phase != phase {
                return Err(format!("train.{name}.phase must be {phase}, got {}", cfg.phase));
            }
            cfg.validate().map_err(|e| format!("train.{name}: {e}"))?;
        }
        ChannelModel::new(self.channel.bandwidth(), self.channel.latency()).map_err(|e| format!("channel: {e}"))?;
        if self.stats.trials == 0 {
            return Err("stats.trials must be positive".into());
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err("output_dir must not be empty".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"compression_rate": 0.5, "candidates": {"mode": "explicit", "layers": [3]}}"#)
            .unwrap();
        assert_eq!(cfg.compression_rate, 0.5);
        assert_eq!(cfg.candidates, Candidates::Explicit { layers: vec![3] });
        assert_eq!(cfg.train.ae.epochs, 200);
    }

    #[test]
    fn rejects_bad_values() {
        for bad in [
            r#"{"compression_rate": 1.0}"#,
            r#"{"val_fraction": 0.6, "test_fraction": 0.5}"#,
            r#"{"candidates": {"mode": "explicit", "layers": []}}"#,
            r#"{"dataset": {"source": "idx", "images": "/nonexistent/a", "labels": "/nonexistent/b"}}"#,
            r#"{"unknown_field": 1}"#,
            r#"{"stats": {"trials": 0}}"#,
        ] {
            assert!(ExperimentConfig::from_json(bad).is_err(), "{bad}");
        }
    }
}
