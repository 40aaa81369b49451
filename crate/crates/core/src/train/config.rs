use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{FramePolicy, FrameSpec, Grayscale, FRAME_COUNT, FRAME_SIZE, SPLIT_SIZES};
use crate::error::{Error, Result};
use crate::models::ArchId;
use crate::optim::{OneCycleConfig, DEFAULT_CLIP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub split: u64,
    pub shuffle: u64,
}

fn default_max_lr() -> f64 {
    1e-3
}
fn default_max_epochs() -> usize {
    50
}
fn default_batch_size() -> usize {
    4
}
fn default_patience() -> usize {
    3
}
fn default_min_delta() -> f64 {
    1e-4
}
fn default_clip() -> f64 {
    DEFAULT_CLIP
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_split_sizes() -> [usize; 3] {
    SPLIT_SIZES
}
fn default_frame_count() -> usize {
    FRAME_COUNT
}
fn default_frame_size() -> [usize; 2] {
    FRAME_SIZE
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}
fn default_tabular_delimiter() -> char {
    ';'
}
fn default_manifest_delimiter() -> char {
    ','
}

/// Training run configuration, read from JSON. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchId,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_max_lr")]
    pub max_lr: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
    pub manifest: PathBuf,
    #[serde(default)]
    pub tabular: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_clip")]
    pub clip_value: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_split_sizes")]
    pub split_sizes: [usize; 3],
    #[serde(default = "default_frame_count")]
    pub frame_count: usize,
    /// `[height, width]`
    #[serde(default = "default_frame_size")]
    pub frame_size: [usize; 2],
    #[serde(default)]
    pub frame_policy: FramePolicy,
    #[serde(default)]
    pub grayscale: Grayscale,
    #[serde(default = "default_tabular_delimiter")]
    pub tabular_delimiter: char,
    #[serde(default = "default_manifest_delimiter")]
    pub manifest_delimiter: char,
}

impl TrainConfig {
    /// Defaults for everything but the architecture and manifest.
    pub fn new(arch: ArchId, manifest: impl Into<PathBuf>) -> Self {
        TrainConfig {
            arch,
            seeds: Seeds::default(),
            max_lr: default_max_lr(),
            max_epochs: default_max_epochs(),
            batch_size: default_batch_size(),
            patience: default_patience(),
            min_delta: default_min_delta(),
            manifest: manifest.into(),
            tabular: None,
            out_dir: default_out_dir(),
            clip_value: default_clip(),
            weight_decay: default_weight_decay(),
            split_sizes: default_split_sizes(),
            frame_count: default_frame_count(),
            frame_size: default_frame_size(),
            frame_policy: FramePolicy::default(),
            grayscale: Grayscale::default(),
            tabular_delimiter: default_tabular_delimiter(),
            manifest_delimiter: default_manifest_delimiter(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_epochs", self.max_epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("patience", self.patience as f64),
            ("min_delta", self.min_delta),
            ("clip_value", self.clip_value),
            ("weight_decay", self.weight_decay),
            ("frame_count", self.frame_count as f64),
            ("frame height", self.frame_size[0] as f64),
            ("frame width", self.frame_size[1] as f64),
            ("train split size", self.split_sizes[0] as f64),
            ("validation split size", self.split_sizes[1] as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, c) in [
            ("tabular_delimiter", self.tabular_delimiter),
            ("manifest_delimiter", self.manifest_delimiter),
        ] {
            if !c.is_ascii() {
                return Err(Error::Config(format!("{name} must be a single ASCII character")));
            }
        }
        OneCycleConfig::new(self.max_lr, 2)?;
        Ok(())
    }

    pub fn frame_spec(&self) -> FrameSpec {
        FrameSpec {
            count: self.frame_count,
            size: Some(self.frame_size),
            policy: self.frame_policy,
            grayscale: self.grayscale,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = TrainConfig::from_json(r#"{"arch": "resnet18_3d_tab", "manifest": "m.csv"}"#).unwrap();
        assert_eq!(cfg, TrainConfig::new(ArchId::Resnet18Tab, "m.csv"));
        assert_eq!(cfg.max_epochs, 50);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.patience, 3);
        assert_eq!(cfg.min_delta, 1e-4);
        assert_eq!(cfg.clip_value, 0.1);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!(cfg.max_lr, 1e-3);
    }

    #[test]
    fn rejects_unknown_and_invalid_fields() {
        assert!(matches!(
            TrainConfig::from_json(r#"{"arch": "resnet18_3d", "manifest": "m", "lr": 1}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            TrainConfig::from_json(r#"{"arch": "resnet50", "manifest": "m"}"#),
            Err(Error::Config(_))
        ));
        assert!(TrainConfig::from_json(r#"{"arch": "resnet18_3d", "manifest": "m", "batch_size": 0}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"arch": "resnet18_3d", "manifest": "m", "max_lr": 0.5}"#).is_err());
        assert!(TrainConfig::from_json(
            r#"{"arch": "resnet18_3d", "manifest": "m", "seeds": {"init": 1, "split": 2, "shuffle": 3, "x": 4}}"#
        )
        .is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = TrainConfig::new(ArchId::Resnet34Tab, "/data/m.csv");
        cfg.tabular = Some("/data/t.csv".into());
        cfg.frame_policy = FramePolicy::CenterFit;
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
    }
}
