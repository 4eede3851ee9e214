//! Model and training hyperparameters. Both serialize as flat JSON objects.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the temporal attention output projection is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalOutInit {
    /// Value-copy of the spatial output projection.
    Copy,
    /// Zero weights and bias, so the temporal branch starts silent.
    Zero,
}

/// Which features are concatenated into the grounded encoder's key/value set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    /// `[T·g_t ⊙ V_ft ; S·g_s ⊙ V_fs ; V_L]`
    TextDependent,
    /// `[V_ft ; V_fs ; V_L]`
    Vanilla,
    /// `V_L` only.
    Original,
    /// `[V_ft ; V_L]`
    OriginalTemporal,
    /// `[V_fs ; V_L]`
    OriginalSpatial,
}

impl PoolingMode {
    pub const ALL: [PoolingMode; 5] = [
        PoolingMode::TextDependent,
        PoolingMode::Vanilla,
        PoolingMode::Original,
        PoolingMode::OriginalTemporal,
        PoolingMode::OriginalSpatial,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PoolingMode::TextDependent => "text_dependent",
            PoolingMode::Vanilla => "vanilla",
            PoolingMode::Original => "original",
            PoolingMode::OriginalTemporal => "original_temporal",
            PoolingMode::OriginalSpatial => "original_spatial",
        }
    }

    pub fn has_temporal(self) -> bool {
        matches!(self, Self::TextDependent | Self::Vanilla | Self::OriginalTemporal)
    }

    pub fn has_spatial(self) -> bool {
        matches!(self, Self::TextDependent | Self::Vanilla | Self::OriginalSpatial)
    }

    /// Row count of the assembled feature matrix.
    pub fn feature_rows(self, frames: usize, patches: usize) -> usize {
        let mut rows = 1 + frames * patches;
        if self.has_temporal() {
            rows += frames;
        }
        if self.has_spatial() {
            rows += patches;
        }
        rows
    }
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown pooling mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub frames: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub projection_dim: usize,
    pub ffn_dim: usize,
    pub patch_size: usize,
    pub frame_resolution: usize,
    pub channels: usize,
    pub pooling_temperature: f64,
    pub contrastive_temperature_init: f64,
    pub answer_count: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub temporal_out_init: TemporalOutInit,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale default: L=4, T=4, 32×32 frames with 8×8 patches (S=16), D=64.
    pub fn toy() -> Self {
        Self {
            num_layers: 4,
            frames: 4,
            hidden_dim: 64,
            num_heads: 4,
            projection_dim: 32,
            ffn_dim: 256,
            patch_size: 8,
            frame_resolution: 32,
            channels: 1,
            pooling_temperature: 1.0,
            contrastive_temperature_init: 0.07,
            answer_count: 8,
            vocab_size: 64,
            max_text_len: 12,
            temporal_out_init: TemporalOutInit::Copy,
            init_std: 0.1,
        }
    }

    /// Smallest shape used by the finite-difference suites: L=2, T=2, S=4, D=8.
    pub fn grad_check_toy() -> Self {
        Self {
            num_layers: 2,
            frames: 2,
            hidden_dim: 8,
            num_heads: 2,
            projection_dim: 4,
            ffn_dim: 16,
            patch_size: 4,
            frame_resolution: 8,
            channels: 1,
            pooling_temperature: 1.0,
            contrastive_temperature_init: 0.07,
            answer_count: 3,
            vocab_size: 16,
            max_text_len: 6,
            temporal_out_init: TemporalOutInit::Copy,
            init_std: 0.5,
        }
    }

    /// ViT-B/16-sized shape at 224×224 and 8 frames. Not used by tests.
    pub fn paper_scale() -> Self {
        Self {
            num_layers: 12,
            frames: 8,
            hidden_dim: 768,
            num_heads: 12,
            projection_dim: 256,
            ffn_dim: 3072,
            patch_size: 16,
            frame_resolution: 224,
            channels: 3,
            pooling_temperature: 1.0,
            contrastive_temperature_init: 0.07,
            answer_count: 1500,
            vocab_size: 30524,
            max_text_len: 40,
            temporal_out_init: TemporalOutInit::Copy,
            init_std: 0.02,
        }
    }

    pub fn patches_per_frame(&self) -> usize {
        let side = self.frame_resolution / self.patch_size.max(1);
        side * side
    }

    /// Width of one flattened raw patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.frames == 0 || self.num_heads == 0 {
            return fail("num_layers, frames and num_heads must be >= 1".into());
        }
        if self.hidden_dim % self.num_heads != 0 {
            return fail(format!("hidden_dim {} not divisible by num_heads {}", self.hidden_dim, self.num_heads));
        }
        if self.patch_size == 0 || self.frame_resolution % self.patch_size != 0 || self.frame_resolution == 0 {
            return fail(format!(
                "frame_resolution {} must be a positive multiple of patch_size {}",
                self.frame_resolution, self.patch_size
            ));
        }
        if !(self.pooling_temperature > 0.0) || !(self.contrastive_temperature_init > 0.0) {
            return fail("temperatures must be > 0".into());
        }
        if self.vocab_size < 4 || self.max_text_len < 2 || self.answer_count == 0 {
            return fail("vocab_size >= 4, max_text_len >= 2 and answer_count >= 1 required".into());
        }
        if self.projection_dim == 0 || self.ffn_dim == 0 || self.channels == 0 {
            return fail("projection_dim, ffn_dim and channels must be >= 1".into());
        }
        Ok(())
    }
}

/// Learning-rate schedule after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    LinearDecay,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub scaling_lr_multiplier: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_ratio: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub epochs: usize,
    /// When set, overrides `epochs` with an exact optimizer step count.
    pub steps: Option<usize>,
    pub frames_train: usize,
    pub frames_eval: usize,
    pub pooling_mode: PoolingMode,
    pub seed: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Desk-scale profile used by tests and the CLI defaults.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            scaling_lr_multiplier: 1.25,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            warmup_ratio: 0.1,
            schedule: Schedule::LinearDecay,
            batch_size: 16,
            epochs: 10,
            steps: None,
            frames_train: 4,
            frames_eval: 4,
            pooling_mode: PoolingMode::TextDependent,
            seed: None,
        }
    }

    /// Fine-tuning values for text-to-video retrieval at full scale.
    pub fn paper_scale_retrieval() -> Self {
        Self {
            learning_rate: 2.5e-5,
            batch_size: 64,
            epochs: 5,
            frames_train: 8,
            frames_eval: 8,
            ..Self::desk()
        }
    }

    /// Fine-tuning values for video question answering at full scale.
    pub fn paper_scale_qa() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 96,
            epochs: 10,
            frames_train: 16,
            frames_eval: 16,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !(self.scaling_lr_multiplier >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("rates must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio {} not in [0, 1)", self.warmup_ratio)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2 (in-batch negatives)".into()));
        }
        Ok(())
    }
}

/// Everything a run needs, serialized as one flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Apply `key=value` overrides on top of a (possibly empty) JSON object.
    /// Values parse as JSON when possible and fall back to strings.
    pub fn from_json_with_overrides(base: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let known = match serde_json::to_value(RunConfig::default())? {
            serde_json::Value::Object(m) => m,
            _ => unreachable!("RunConfig serializes to an object"),
        };
        let mut obj = match base {
            Some(text) => match serde_json::from_str::<serde_json::Value>(text)? {
                serde_json::Value::Object(m) => m,
                _ => return Err(Error::Config("config file must hold a JSON object".into())),
            },
            None => serde_json::Map::new(),
        };
        if let Some(k) = obj.keys().find(|k| !known.contains_key(*k)) {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
        for (k, v) in overrides {
            if !known.contains_key(k) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
            let val = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.clone()));
            obj.insert(k.clone(), val);
        }
        let cfg: RunConfig = serde_json::from_value(serde_json::Value::Object(obj))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}
