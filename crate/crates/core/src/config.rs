//! Run configuration shared by every pipeline stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::embed::{BackboneConfig, DistanceKind, NegativeMining, Stage1Config, Stage1TrainConfig};
use crate::episode::EpisodeConfig;
use crate::error::{invalid, Error, Result};
use crate::seq::{PrefixSchedule, Stage2Config, Stage2TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackbonePreset {
    Toy,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: u32,
    pub backbone: BackbonePreset,
    pub d_low: usize,
    pub margin: f64,
    pub distance: DistanceKind,
    pub normalize: bool,

    pub stage1_epochs: usize,
    pub stage1_batch_size: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub stage1_negatives: NegativeMining,

    pub hidden_size: usize,
    pub lstm_layers: usize,
    pub prefix_schedule: PrefixSchedule,
    pub stage2_epochs: usize,
    pub stage2_batch_size: usize,
    pub stage2_lr: f64,
    pub stage2_negatives: NegativeMining,
    pub cache_features: bool,

    pub episode: EpisodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 299,
            backbone: BackbonePreset::Paper,
            d_low: 16,
            margin: 0.3,
            distance: DistanceKind::Euclidean,
            normalize: false,
            stage1_epochs: 300,
            stage1_batch_size: 64,
            lr_backbone: 5e-4,
            lr_head: 5e-3,
            stage1_negatives: NegativeMining::Random,
            hidden_size: 1024,
            lstm_layers: 1,
            prefix_schedule: PrefixSchedule::Auto,
            stage2_epochs: 300,
            stage2_batch_size: 32,
            stage2_lr: 5e-4,
            stage2_negatives: NegativeMining::Random,
            cache_features: true,
            episode: EpisodeConfig::default(),
        }
    }
}

impl RunConfig {
    /// Full-size defaults.
    pub fn paper() -> Self {
        Self::default()
    }

    /// Desk-scale preset: 64x64 images, 10 frames, small networks and
    /// hardest-negative mining so training converges in seconds.
    pub fn toy() -> Self {
        Self {
            image_size: 64,
            backbone: BackbonePreset::Toy,
            stage1_epochs: 200,
            stage1_batch_size: 20,
            lr_backbone: 1e-3,
            lr_head: 1e-2,
            stage1_negatives: NegativeMining::Hardest,
            hidden_size: 32,
            stage2_epochs: 100,
            stage2_lr: 5e-3,
            stage2_negatives: NegativeMining::Hardest,
            episode: crate::data::toy_episode_config(64, 10),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(invalid(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        positive("image_size", self.image_size as usize)?;
        positive("stage1_batch_size", self.stage1_batch_size)?;
        positive("stage2_batch_size", self.stage2_batch_size)?;
        positive("episode.frames", self.episode.frames)?;
        for (name, lr) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_head", self.lr_head),
            ("stage2_lr", self.stage2_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(invalid(format!("{name} must be a positive number, got {lr}")));
            }
        }
        if !(0.0 < self.episode.canny_low && self.episode.canny_low <= self.episode.canny_high && self.episode.canny_high <= 1.0) {
            return Err(invalid("canny thresholds must satisfy 0 < low <= high <= 1"));
        }
        self.stage1_config().validate()?;
        if self.hidden_size == 0 || self.lstm_layers == 0 {
            return Err(invalid("hidden_size and lstm_layers must be positive"));
        }
        Ok(())
    }

    pub fn stage1_config(&self) -> Stage1Config {
        let backbone = match self.backbone {
            BackbonePreset::Toy => BackboneConfig::toy(self.image_size),
            BackbonePreset::Paper => BackboneConfig {
                input_size: self.image_size,
                ..BackboneConfig::paper()
            },
        };
        Stage1Config {
            backbone,
            d_low: self.d_low,
            margin: self.margin,
            distance: self.distance,
            normalize: self.normalize,
        }
    }

    pub fn stage1_train(&self) -> Stage1TrainConfig {
        Stage1TrainConfig {
            epochs: self.stage1_epochs,
            batch_size: self.stage1_batch_size,
            lr_backbone: self.lr_backbone,
            lr_head: self.lr_head,
            seed: self.seed,
            negatives: self.stage1_negatives,
        }
    }

    pub fn stage2_config(&self) -> Stage2Config {
        Stage2Config {
            hidden_size: self.hidden_size,
            layers: self.lstm_layers,
            margin: self.margin,
            prefix_schedule: self.prefix_schedule,
        }
    }

    pub fn stage2_train(&self) -> Stage2TrainConfig {
        Stage2TrainConfig {
            epochs: self.stage2_epochs,
            batch_size: self.stage2_batch_size,
            lr: self.stage2_lr,
            seed: self.seed,
            cache_features: self.cache_features,
            negatives: self.stage2_negatives,
        }
    }

    /// Parse TOML or JSON (by extension; TOML otherwise) and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes to TOML")
    }

    /// Override one field by dotted name (`stage2_lr`, `episode.frames`).
    /// The value is read as JSON when possible and as a bare string otherwise.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| invalid(format!("unknown config field {key:?}")))?;
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        let updated: Self =
            serde_json::from_value(tree).map_err(|e| invalid(format!("bad value {value:?} for {key}: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// Hash of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        crate::checkpoint::hash_bytes(serde_json::to_string(self).expect("serializable").as_bytes())
    }
}
