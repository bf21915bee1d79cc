//! Run configuration as read from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::encoder::EncoderConfig;
use crate::gai::GaiConfig;
use crate::heads::{TaskKind, TaskSpec};
use crate::model::{ModelConfig, ModelVariant};
use crate::{Error, Result};

fn default_tasks() -> Vec<TaskSpec> {
    vec![TaskSpec::new(TaskKind::Segmentation), TaskSpec::new(TaskKind::Depth)]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandwidthSettings {
    /// Target `R`; solved to a downscaled channel count. Absent means no adapter.
    #[serde(default)]
    pub target_ratio: Option<f64>,
}

fn d_lr() -> f64 {
    1e-4
}
fn d_batch() -> usize {
    8
}
fn d_b1() -> f64 {
    0.9
}
fn d_b2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_epochs() -> usize {
    30
}
fn d_patience() -> usize {
    10
}
fn d_train_size() -> usize {
    512
}
fn d_val_size() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_b1")]
    pub beta1: f64,
    #[serde(default = "d_b2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_epochs")]
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_train_size")]
    pub train_size: usize,
    #[serde(default = "d_val_size")]
    pub val_size: usize,
    #[serde(default)]
    pub variant: ModelVariant,
    /// Train through the configured channel instead of a noiseless one.
    #[serde(default)]
    pub noisy: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: d_lr(),
            batch_size: d_batch(),
            beta1: d_b1(),
            beta2: d_b2(),
            eps: d_eps(),
            max_epochs: d_epochs(),
            patience: d_patience(),
            train_size: d_train_size(),
            val_size: d_val_size(),
            variant: ModelVariant::Full,
            noisy: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub gai: GaiConfig,
    #[serde(default = "default_tasks")]
    pub tasks: Vec<TaskSpec>,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub bandwidth: BandwidthSettings,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            gai: GaiConfig::default(),
            tasks: default_tasks(),
            channel: ChannelConfig::default(),
            bandwidth: BandwidthSettings::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            gai: self.gai.clone(),
            tasks: self.tasks.clone(),
            variant: self.train.variant,
            target_ratio: self.bandwidth.target_ratio,
            transmit_power: self.channel.transmit_power,
        }
    }

    pub fn with_variant(&self, variant: ModelVariant) -> Self {
        let mut c = self.clone();
        c.train.variant = variant;
        c
    }

    /// Class count of the synthetic scenes, taken from the segmentation or
    /// classification task when present.
    pub fn scene_classes(&self) -> usize {
        self.tasks
            .iter()
            .find_map(|t| match t.kind {
                TaskKind::Segmentation | TaskKind::Classification => t.num_classes,
                _ => None,
            })
            .unwrap_or(4)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.channel.validate()?;
        let k = self.scene_classes();
        for t in &self.tasks {
            if let Some(c) = t.num_classes {
                if c != k {
                    return Err(Error::Config(format!(
                        "task {} has {c} classes but scenes have {k}",
                        t.name()
                    )));
                }
            }
        }
        let mut kinds: Vec<_> = self.tasks.iter().map(|t| t.kind).collect();
        kinds.sort_by_key(|k| k.as_str());
        kinds.dedup();
        if kinds.len() != self.tasks.len() {
            return Err(Error::Config("each task kind may appear once".into()));
        }
        let [c, h, w] = self.encoder.input;
        if c != 3 || h < 16 || w < 16 {
            return Err(Error::Config(format!(
                "synthetic scenes need a 3×H×W input with H, W >= 16, got {c}×{h}×{w}"
            )));
        }
        let t = &self.train;
        if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        if t.batch_size == 0 || t.train_size == 0 || t.val_size == 0 {
            return Err(Error::Config("batch_size, train_size and val_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            return Err(Error::Config("Adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.patience, 10);
        assert_eq!(c.scene_classes(), 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"encoder_x": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"lr": 0.1}}"#).is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let mut c = RunConfig::default();
        c.seed = 7;
        c.bandwidth.target_ratio = Some(0.25);
        c.train.variant = ModelVariant::SimpAtt;
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn inconsistent_values_are_rejected() {
        let bad = [
            r#"{"train": {"learning_rate": -1}}"#,
            r#"{"train": {"batch_size": 0}}"#,
            r#"{"encoder": {"input": [1, 32, 32], "channels": [4], "strides": [1]}}"#,
            r#"{"tasks": [{"kind": "depth"}, {"kind": "depth"}]}"#,
            r#"{"tasks": [{"kind": "segmentation", "num_classes": 3}, {"kind": "classification", "num_classes": 5}]}"#,
            r#"{"channel": {"transmit_power": 0}}"#,
            r#"{"bandwidth": {"target_ratio": 0}}"#,
        ];
        for b in bad {
            assert!(RunConfig::from_json(b).is_err(), "{b}");
        }
        assert!(RunConfig::from_json(r#"{"train": {"learning_rate": 0}}"#).is_ok());
    }
}
