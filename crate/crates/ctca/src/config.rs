//! Run configuration: one TOML file with a section per stage, plus dotted
//! `--section.key=value` overrides from the command line.

use anyhow::{bail, Context};
use ctca_core::attention::WeightMode;
use ctca_core::encoder::EncoderConfig;
use ctca_core::lm::{LmConfig, SgdSchedule};
use ctca_core::model::ModelConfig;
use ctca_core::search::DecodeConfig;
use ctca_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::features::FeatureConfig;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub features: FeaturesSection,
    pub bpe: BpeSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub lm: LmSection,
    pub decode: DecodeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            features: FeaturesSection::default(),
            bpe: BpeSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            lm: LmSection::default(),
            decode: DecodeSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturesSection {
    #[serde(flatten)]
    pub fbank: FeatureConfig,
    /// Speed factors applied to training audio; each adds one copy.
    pub speed_factors: Vec<f64>,
}

impl Default for FeaturesSection {
    fn default() -> Self {
        Self { fbank: FeatureConfig::default(), speed_factors: vec![0.9, 1.0, 1.1] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BpeSection {
    /// Target vocabulary size including specials; merges stop early when
    /// no pair repeats.
    pub units: usize,
}

impl Default for BpeSection {
    fn default() -> Self {
        Self { units: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Softmax,
    Smoothed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub cnn_layers: usize,
    pub cnn_channels: usize,
    pub bilstm_layers: usize,
    pub cells_per_direction: usize,
    pub ctc_bilstm: bool,
    pub attention: AttentionKind,
    pub att_dim: usize,
    pub location_filters: usize,
    pub location_width: usize,
    pub embed_dim: usize,
    pub dec_units: usize,
    pub dec_layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(8);
        Self {
            cnn_layers: d.encoder.cnn_layers,
            cnn_channels: d.encoder.cnn_channels,
            bilstm_layers: d.encoder.bilstm_layers,
            cells_per_direction: d.encoder.cells_per_direction,
            ctc_bilstm: d.ctc_bilstm,
            attention: AttentionKind::Smoothed,
            att_dim: d.att_dim,
            location_filters: d.location_filters,
            location_width: d.location_width,
            embed_dim: d.embed_dim,
            dec_units: d.dec_units,
            dec_layers: d.dec_layers,
        }
    }
}

impl ModelSection {
    pub fn to_model(&self, vocab_size: usize, input_dim: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            encoder: EncoderConfig {
                input_dim,
                cnn_layers: self.cnn_layers,
                cnn_channels: self.cnn_channels,
                bilstm_layers: self.bilstm_layers,
                cells_per_direction: self.cells_per_direction,
            },
            ctc_bilstm: self.ctc_bilstm,
            att_dim: self.att_dim,
            location_filters: self.location_filters,
            location_width: self.location_width,
            embed_dim: self.embed_dim,
            dec_units: self.dec_units,
            dec_layers: self.dec_layers,
            weight_mode: match self.attention {
                AttentionKind::Softmax => WeightMode::Softmax,
                AttentionKind::Smoothed => WeightMode::Smoothed,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub alpha: f64,
    pub epsilon: f64,
    pub rho: f64,
    pub l2: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub val_interval: usize,
    pub eps_decay: f64,
    pub iterations: usize,
    /// Wall-clock cap in seconds (0 = none); training stops at the first
    /// iteration boundary past it.
    pub time_limit_s: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            alpha: t.alpha,
            epsilon: t.epsilon,
            rho: t.rho,
            l2: t.l2,
            clip_norm: t.clip_norm,
            batch_size: t.batch_size,
            val_interval: t.val_interval,
            eps_decay: t.eps_decay,
            iterations: t.iterations,
            time_limit_s: 0.0,
        }
    }
}

impl TrainSection {
    pub fn to_train(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            epsilon: self.epsilon,
            rho: self.rho,
            l2: self.l2,
            clip_norm: self.clip_norm,
            batch_size: self.batch_size,
            val_interval: self.val_interval,
            eps_decay: self.eps_decay,
            iterations: self.iterations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmSection {
    pub embed_dim: usize,
    pub units: usize,
    pub layers: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub clip_norm: f64,
}

impl Default for LmSection {
    fn default() -> Self {
        let c = LmConfig::desk(8);
        let s = SgdSchedule::default();
        Self {
            embed_dim: c.embed_dim,
            units: c.units,
            layers: c.layers,
            epochs: s.epochs,
            lr: s.initial_lr,
            lr_decay: s.decay,
            decay_every: s.decay_every,
            clip_norm: s.clip_norm,
        }
    }
}

impl LmSection {
    pub fn to_lm(&self, vocab_size: usize) -> LmConfig {
        LmConfig { vocab_size, embed_dim: self.embed_dim, units: self.units, layers: self.layers }
    }

    pub fn schedule(&self) -> SgdSchedule {
        SgdSchedule {
            initial_lr: self.lr,
            decay: self.lr_decay,
            decay_every: self.decay_every,
            epochs: self.epochs,
            clip_norm: self.clip_norm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub beam: usize,
    pub lm_weight: f64,
    pub ctc_weight: f64,
    pub max_len_ratio: f64,
    pub length_penalty: f64,
    /// Hypotheses written per utterance.
    pub nbest: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        let d = DecodeConfig::default();
        Self {
            beam: d.beam,
            lm_weight: d.lm_weight,
            ctc_weight: d.ctc_weight,
            max_len_ratio: d.max_len_ratio,
            length_penalty: d.length_penalty,
            nbest: 5,
        }
    }
}

impl DecodeSection {
    pub fn to_decode(&self) -> DecodeConfig {
        DecodeConfig {
            beam: self.beam,
            lm_weight: self.lm_weight,
            ctc_weight: self.ctc_weight,
            max_len_ratio: self.max_len_ratio,
            length_penalty: self.length_penalty,
        }
    }
}

/// Parses an override value as TOML, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Defaults, then `file` (if any), then `overrides` (`a.b=value`).
    pub fn load(file: Option<&str>, overrides: &[(String, String)]) -> anyhow::Result<Self> {
        let mut table = match file {
            Some(text) => toml::from_str::<toml::Table>(text).context("config file is not valid TOML")?,
            None => toml::Table::new(),
        };
        for (key, raw) in overrides {
            let parts: Vec<&str> = key.split('.').collect();
            if parts.len() < 2 || parts.iter().any(|p| p.is_empty()) {
                bail!("override {key:?} must be a dotted path like train.alpha");
            }
            let mut cur = &mut table;
            for p in &parts[..parts.len() - 1] {
                let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
                cur = entry.as_table_mut().with_context(|| format!("override {key:?}: {p} is not a section"))?;
            }
            cur.insert(parts[parts.len() - 1].to_string(), override_value(raw));
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
