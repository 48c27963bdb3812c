//! Pipeline configuration: a flat `key = value` text format with
//! defaults, validation, and a canonical hash for run provenance.
//!
//! ```text
//! # comments and blank lines are ignored
//! seed = 7
//! policy = fastv
//! reduction = 0.75
//! encoder.n_patches = 144
//! workload.n_salient = 9
//! ```
//!
//! Unknown keys, duplicate keys, and malformed values are errors — a
//! typo'd experiment config should fail loudly, not silently run the
//! defaults.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::model::{DecoderConfig, EncoderConfig, ModelError, SequenceLayout};
use crate::prune::keep_count;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    MissingEquals { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} set twice")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: {key} = {value:?} is not a valid {expected}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("config field {field}: {detail}")]
    Invalid { field: &'static str, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

// ---- Policy ----

/// The six pruning policies the pipeline can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Encoder [CLS] attention ranking, pruned before the decoder.
    FasterVlm,
    /// Decoder last-row attention ranking, pruned at decoder layer 2.
    Fastv,
    /// Seeded uniform keep-set, pruned before the decoder.
    Random,
    /// Patch→patch attention ranking, pruned before the decoder.
    PatchAttention,
    /// [CLS] ranking but pruned at decoder layer 2.
    ClsAtLayer2,
    /// [CLS] ranking with pruned tokens merged into kept ones.
    ClsMerge,
}

pub const ALL_POLICIES: [Policy; 6] = [
    Policy::FasterVlm,
    Policy::Fastv,
    Policy::Random,
    Policy::PatchAttention,
    Policy::ClsAtLayer2,
    Policy::ClsMerge,
];

impl Policy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Policy::FasterVlm => "faster_vlm",
            Policy::Fastv => "fastv",
            Policy::Random => "random",
            Policy::PatchAttention => "patch_attention",
            Policy::ClsAtLayer2 => "cls_at_layer2",
            Policy::ClsMerge => "cls_merge",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ALL_POLICIES
            .iter()
            .find(|p| p.as_str() == s)
            .copied()
            .ok_or_else(|| format!("unknown policy {s:?}"))
    }
}

/// How kept tokens are numbered after pruning before the decoder:
/// `packed` renumbers them consecutively, `original` keeps their
/// pre-prune position ids (leaving gaps where tokens were dropped).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    Packed,
    Original,
}

impl PositionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PositionMode::Packed => "packed",
            PositionMode::Original => "original",
        }
    }
}

impl FromStr for PositionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "packed" => Ok(PositionMode::Packed),
            "original" => Ok(PositionMode::Original),
            other => Err(format!("unknown position mode {other:?}")),
        }
    }
}

// ---- PipelineConfig ----

/// Everything a pipeline run depends on. Seeds for the encoder and
/// decoder default to `seed+1` and `seed+2` unless pinned explicitly.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub policy: Policy,
    pub reduction: f64,
    pub k_merge: usize,
    pub position_ids: PositionMode,
    pub max_new_tokens: usize,
    /// Overrides the budget-derived kept count when set.
    pub keep_count: Option<usize>,
    /// Overrides the encoder layer scores are read from (default:
    /// penultimate).
    pub extract_layer: Option<usize>,

    pub enc_n_patches: usize,
    pub enc_d_model: usize,
    pub enc_n_heads: usize,
    pub enc_n_layers: usize,
    pub enc_pos_embed: bool,
    pub enc_seed: Option<u64>,

    pub dec_d_model: usize,
    pub dec_n_heads: usize,
    pub dec_n_layers: usize,
    pub dec_d_ffn: usize,
    pub dec_vocab: usize,
    pub dec_pos_embed: bool,
    pub dec_seed: Option<u64>,

    pub sys_len: usize,
    pub txt_len: usize,
    /// How many planted high-salience patches the synthetic workload
    /// carries.
    pub n_salient: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            policy: Policy::FasterVlm,
            reduction: 0.5,
            k_merge: 1,
            position_ids: PositionMode::Packed,
            max_new_tokens: 8,
            keep_count: None,
            extract_layer: None,
            enc_n_patches: 64,
            enc_d_model: 64,
            enc_n_heads: 4,
            enc_n_layers: 2,
            enc_pos_embed: true,
            enc_seed: None,
            dec_d_model: 64,
            dec_n_heads: 4,
            dec_n_layers: 3,
            dec_d_ffn: 256,
            dec_vocab: 256,
            dec_pos_embed: true,
            dec_seed: None,
            sys_len: 2,
            txt_len: 4,
            n_salient: 5,
        }
    }
}

impl PipelineConfig {
    /// Parses the `key = value` format on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = PipelineConfig::default();
        let mut seen: HashSet<String> = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) =
                content
                    .split_once('=')
                    .ok_or_else(|| ConfigError::MissingEquals {
                        line,
                        text: content.to_string(),
                    })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.to_string(),
                });
            }
            cfg.apply(line, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        fn bad(line: usize, key: &str, value: &str, expected: &'static str) -> ConfigError {
            ConfigError::BadValue {
                line,
                key: key.to_string(),
                value: value.to_string(),
                expected,
            }
        }
        macro_rules! num {
            ($ty:ty, $what:literal) => {
                value
                    .parse::<$ty>()
                    .map_err(|_| bad(line, key, value, $what))?
            };
        }
        let parse_bool = || match value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(bad(line, key, value, "boolean (true/false)")),
        };
        match key {
            "seed" => self.seed = num!(u64, "unsigned integer"),
            "policy" => {
                self.policy = value
                    .parse()
                    .map_err(|_| bad(line, key, value, "policy name"))?
            }
            "reduction" => self.reduction = num!(f64, "number"),
            "k_merge" => self.k_merge = num!(usize, "unsigned integer"),
            "position_ids" => {
                self.position_ids = value
                    .parse()
                    .map_err(|_| bad(line, key, value, "packed or original"))?
            }
            "max_new_tokens" => self.max_new_tokens = num!(usize, "unsigned integer"),
            "keep_count" => self.keep_count = Some(num!(usize, "unsigned integer")),
            "extract_layer" => self.extract_layer = Some(num!(usize, "unsigned integer")),
            "encoder.n_patches" => self.enc_n_patches = num!(usize, "unsigned integer"),
            "encoder.d_model" => self.enc_d_model = num!(usize, "unsigned integer"),
            "encoder.n_heads" => self.enc_n_heads = num!(usize, "unsigned integer"),
            "encoder.n_layers" => self.enc_n_layers = num!(usize, "unsigned integer"),
            "encoder.pos_embed" => self.enc_pos_embed = parse_bool()?,
            "encoder.seed" => self.enc_seed = Some(num!(u64, "unsigned integer")),
            "decoder.d_model" => self.dec_d_model = num!(usize, "unsigned integer"),
            "decoder.n_heads" => self.dec_n_heads = num!(usize, "unsigned integer"),
            "decoder.n_layers" => self.dec_n_layers = num!(usize, "unsigned integer"),
            "decoder.d_ffn" => self.dec_d_ffn = num!(usize, "unsigned integer"),
            "decoder.vocab" => self.dec_vocab = num!(usize, "unsigned integer"),
            "decoder.pos_embed" => self.dec_pos_embed = parse_bool()?,
            "decoder.seed" => self.dec_seed = Some(num!(u64, "unsigned integer")),
            "workload.sys_len" => self.sys_len = num!(usize, "unsigned integer"),
            "workload.txt_len" => self.txt_len = num!(usize, "unsigned integer"),
            "workload.n_salient" => self.n_salient = num!(usize, "unsigned integer"),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |field: &'static str, detail: String| ConfigError::Invalid { field, detail };
        if !self.reduction.is_finite() || !(0.0..1.0).contains(&self.reduction) {
            return Err(invalid(
                "reduction",
                format!("{} outside [0, 1)", self.reduction),
            ));
        }
        if self.k_merge == 0 {
            return Err(invalid("k_merge", "must be at least 1".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(invalid("max_new_tokens", "must be at least 1".into()));
        }
        if let Some(k) = self.keep_count {
            if k == 0 || k > self.enc_n_patches {
                return Err(invalid(
                    "keep_count",
                    format!("{k} outside 1..={}", self.enc_n_patches),
                ));
            }
        }
        if let Some(layer) = self.extract_layer {
            if layer >= self.enc_n_layers {
                return Err(invalid(
                    "extract_layer",
                    format!("{layer} outside 0..{}", self.enc_n_layers),
                ));
            }
        }
        if self.enc_n_patches < 2 {
            return Err(invalid(
                "encoder.n_patches",
                "need at least 2 patches for attention statistics".into(),
            ));
        }
        if matches!(self.policy, Policy::Fastv | Policy::ClsAtLayer2) && self.dec_n_layers < 3 {
            return Err(invalid(
                "decoder.n_layers",
                format!(
                    "policy {} prunes at decoder layer 2, which needs at least 3 layers (got {})",
                    self.policy, self.dec_n_layers
                ),
            ));
        }
        if self.n_salient == 0 || self.n_salient > self.enc_n_patches {
            return Err(invalid(
                "workload.n_salient",
                format!("{} outside 1..={}", self.n_salient, self.enc_n_patches),
            ));
        }
        if self.sys_len == 0 {
            return Err(invalid("workload.sys_len", "must be at least 1".into()));
        }
        if self.txt_len == 0 {
            return Err(invalid("workload.txt_len", "must be at least 1".into()));
        }
        self.encoder_config().validate()?;
        self.decoder_config().validate()?;
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            n_patches: self.enc_n_patches,
            d_model: self.enc_d_model,
            n_heads: self.enc_n_heads,
            n_layers: self.enc_n_layers,
            seed: self.enc_seed.unwrap_or(self.seed.wrapping_add(1)),
            pos_embed: self.enc_pos_embed,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            d_model: self.dec_d_model,
            n_heads: self.dec_n_heads,
            n_layers: self.dec_n_layers,
            d_ffn: self.dec_d_ffn,
            vocab: self.dec_vocab,
            seed: self.dec_seed.unwrap_or(self.seed.wrapping_add(2)),
            pos_embed: self.dec_pos_embed,
        }
    }

    /// Prefill layout for `img_len` surviving image tokens.
    pub fn layout(&self, img_len: usize) -> SequenceLayout {
        SequenceLayout {
            sys_len: self.sys_len,
            img_len,
            txt_len: self.txt_len,
            out_len: 1,
        }
    }

    /// Tokens that survive pruning: the explicit override, else
    /// `max(1, floor(n_patches·(1-reduction)))`.
    pub fn effective_keep(&self) -> usize {
        self.keep_count
            .unwrap_or_else(|| keep_count(self.enc_n_patches, self.reduction))
    }

    /// Encoder layer scores are extracted from: the explicit override,
    /// else the penultimate layer.
    pub fn effective_extract_layer(&self) -> usize {
        self.extract_layer.unwrap_or(self.enc_n_layers - 2)
    }

    /// Canonical rendering: every field in a fixed order, one
    /// `key = value` per line, optional fields only when set. Two configs
    /// are equivalent iff their canonical strings match.
    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        push("seed", self.seed.to_string());
        push("policy", self.policy.to_string());
        push("reduction", self.reduction.to_string());
        push("k_merge", self.k_merge.to_string());
        push("position_ids", self.position_ids.as_str().to_string());
        push("max_new_tokens", self.max_new_tokens.to_string());
        if let Some(k) = self.keep_count {
            push("keep_count", k.to_string());
        }
        if let Some(l) = self.extract_layer {
            push("extract_layer", l.to_string());
        }
        push("encoder.n_patches", self.enc_n_patches.to_string());
        push("encoder.d_model", self.enc_d_model.to_string());
        push("encoder.n_heads", self.enc_n_heads.to_string());
        push("encoder.n_layers", self.enc_n_layers.to_string());
        push("encoder.pos_embed", self.enc_pos_embed.to_string());
        if let Some(seed) = self.enc_seed {
            push("encoder.seed", seed.to_string());
        }
        push("decoder.d_model", self.dec_d_model.to_string());
        push("decoder.n_heads", self.dec_n_heads.to_string());
        push("decoder.n_layers", self.dec_n_layers.to_string());
        push("decoder.d_ffn", self.dec_d_ffn.to_string());
        push("decoder.vocab", self.dec_vocab.to_string());
        push("decoder.pos_embed", self.dec_pos_embed.to_string());
        if let Some(seed) = self.dec_seed {
            push("decoder.seed", seed.to_string());
        }
        push("workload.sys_len", self.sys_len.to_string());
        push("workload.txt_len", self.txt_len.to_string());
        push("workload.n_salient", self.n_salient.to_string());
        s
    }

    /// FNV-1a hash of the canonical string, as 16 hex digits.
    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a64(self.canonical_string().as_bytes()))
    }
}

impl FromStr for PipelineConfig {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PipelineConfig::parse(s)
    }
}

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
