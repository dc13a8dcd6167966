//! Run configuration: one TOML file where every field has a default, plus
//! the digest that stamps all derived artifacts.
//!
//! Precedence is file < environment < flags. Environment overrides exist
//! only for the two directories and the remote endpoint URL.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dsaa_core::text::{AttrCategory, ExtractionConfig, ExtractionMode, Lexicon};
use dsaa_core::train::TrainConfig;
use dsaa_core::world::{GenParams, WorldConfig};
use dsaa_core::encoder::EncoderConfig;
use dsaa_core::objectives::LossWeights;
use serde::{Deserialize, Serialize};

use crate::sha256_hex;

pub const ENV_DATA_DIR: &str = "DSAA_DATA_DIR";
pub const ENV_OUT_DIR: &str = "DSAA_OUT_DIR";
pub const ENV_ENDPOINT: &str = "DSAA_ENDPOINT";

#[derive(Debug)]
pub enum ConfigError {
    Io { path: PathBuf, detail: String },
    Parse { path: PathBuf, detail: String },
    Invalid { detail: String },
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Io { path, detail } => {
                write!(f, "cannot read config {}: {detail}", path.display())
            }
            ConfigError::Parse { path, detail } => {
                write!(f, "cannot parse config {}: {detail}", path.display())
            }
            ConfigError::Invalid { detail } => write!(f, "invalid config: {detail}"),
        }
    }
}

impl std::error::Error for ConfigError {}

fn invalid(detail: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsSection {
    pub data_dir: String,
    pub out_dir: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            data_dir: String::from("data"),
            out_dir: String::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSection {
    pub feature_dim: usize,
    pub text_dim: usize,
    pub noise_std: f64,
    pub min_angle_deg: f64,
}

impl Default for WorldSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        WorldSection {
            feature_dim: w.feature_dim,
            text_dim: w.text_dim,
            noise_std: w.noise_std,
            min_angle_deg: w.min_angle_deg,
        }
    }
}

impl WorldSection {
    pub fn to_core(&self) -> WorldConfig {
        WorldConfig {
            feature_dim: self.feature_dim,
            text_dim: self.text_dim,
            noise_std: self.noise_std,
            min_angle_deg: self.min_angle_deg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub train_records: usize,
    pub eval_records_per_subset: usize,
    pub eval_negatives: usize,
    pub max_distractors: usize,
    pub jittered_per_instance: usize,
    pub decoys: usize,
    pub jitter_scale: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let g = GenParams::default();
        DataSection {
            train_records: g.train_records,
            eval_records_per_subset: g.eval_records_per_subset,
            eval_negatives: g.eval_negatives,
            max_distractors: g.max_distractors,
            jittered_per_instance: g.jittered_per_instance,
            decoys: g.decoys,
            jitter_scale: g.jitter_scale,
        }
    }
}

impl DataSection {
    pub fn to_core(&self) -> GenParams {
        GenParams {
            train_records: self.train_records,
            eval_records_per_subset: self.eval_records_per_subset,
            eval_negatives: self.eval_negatives,
            max_distractors: self.max_distractors,
            jittered_per_instance: self.jittered_per_instance,
            decoys: self.decoys,
            jitter_scale: self.jitter_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSection {
    pub num_layers: usize,
    pub num_heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub ln_eps: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let e = EncoderConfig::desk(0);
        EncoderSection {
            num_layers: e.num_layers,
            num_heads: e.num_heads,
            dim: e.dim,
            ff_dim: e.ff_dim,
            max_len: e.max_len,
            ln_eps: e.ln_eps,
        }
    }
}

/// Adapter shape and placement. Zero bottlenecks are resolved to `dim / 4`
/// during normalization; the enable flags select the ablation variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DsaaSection {
    pub apa_bottleneck: usize,
    pub mod_bottleneck: usize,
    pub gamma_k: f64,
    pub gamma_v: f64,
    pub ln_eps: f64,
    pub modulated_layers: Vec<usize>,
    pub modulate_prefixes: bool,
    pub enable_apa: bool,
    pub enable_modulator: bool,
}

impl Default for DsaaSection {
    fn default() -> Self {
        DsaaSection {
            apa_bottleneck: 0,
            mod_bottleneck: 0,
            gamma_k: 0.1,
            gamma_v: 0.1,
            ln_eps: 1e-5,
            modulated_layers: vec![1, 2, 3, 4],
            modulate_prefixes: false,
            enable_apa: true,
            enable_modulator: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossSection {
    pub lambda_det: f64,
    pub lambda_attr: f64,
    pub alpha_nce: f64,
    pub tau_cls: f64,
    pub tau_attr: f64,
    pub det_warmup_steps: usize,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossWeights::default();
        LossSection {
            lambda_det: l.lambda_det,
            lambda_attr: l.lambda_attr,
            alpha_nce: l.alpha_nce,
            tau_cls: l.tau_cls,
            tau_attr: l.tau_attr,
            det_warmup_steps: l.det_warmup_steps,
        }
    }
}

impl LossSection {
    pub fn to_core(&self) -> LossWeights {
        LossWeights {
            lambda_det: self.lambda_det,
            lambda_attr: self.lambda_attr,
            alpha_nce: self.alpha_nce,
            tau_cls: self.tau_cls,
            tau_attr: self.tau_attr,
            det_warmup_steps: self.det_warmup_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub optimizer: String,
    pub checkpoint_interval: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingSection {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            optimizer: String::from("adamw"),
            checkpoint_interval: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionSection {
    pub mode: String,
    pub endpoint: String,
    pub prompt_template: String,
    pub timeout_ms: u64,
    pub retries: u32,
    /// Category name -> phrase list; empty means the standard world lexicon.
    pub lexicon: BTreeMap<String, Vec<String>>,
}

impl Default for ExtractionSection {
    fn default() -> Self {
        ExtractionSection {
            mode: String::from("lexicon"),
            endpoint: String::new(),
            prompt_template: String::from(
                "List the attribute phrases in this caption: {caption}",
            ),
            timeout_ms: 2000,
            retries: 2,
            lexicon: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub nms_iou: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { nms_iou: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsSection,
    pub world: WorldSection,
    pub data: DataSection,
    pub encoder: EncoderSection,
    pub dsaa: DsaaSection,
    pub losses: LossSection,
    pub training: TrainingSection,
    pub extraction: ExtractionSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Loads the file when given (or present at the default location),
    /// otherwise starts from defaults; then applies environment overrides
    /// and normalizes.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let default_path = PathBuf::from("dsaa.toml");
        let chosen = match path {
            Some(p) => Some(p.to_path_buf()),
            None if default_path.exists() => Some(default_path),
            None => None,
        };
        let mut cfg = match chosen {
            Some(p) => {
                let text = std::fs::read_to_string(&p).map_err(|e| ConfigError::Io {
                    path: p.clone(),
                    detail: e.to_string(),
                })?;
                toml::from_str(&text).map_err(|e| ConfigError::Parse {
                    path: p,
                    detail: e.to_string(),
                })?
            }
            None => RunConfig::default(),
        };
        cfg.apply_env();
        cfg.normalize();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Ok(v) = std::env::var(ENV_DATA_DIR) {
            self.paths.data_dir = v;
        }
        if let Ok(v) = std::env::var(ENV_OUT_DIR) {
            self.paths.out_dir = v;
        }
        if let Ok(v) = std::env::var(ENV_ENDPOINT) {
            self.extraction.endpoint = v;
        }
    }

    /// Resolves sentinel values so the digest reflects effective settings.
    pub fn normalize(&mut self) {
        let b = (self.encoder.dim / 4).max(1);
        if self.dsaa.apa_bottleneck == 0 {
            self.dsaa.apa_bottleneck = b;
        }
        if self.dsaa.mod_bottleneck == 0 {
            self.dsaa.mod_bottleneck = b;
        }
        if self.extraction.lexicon.is_empty() {
            for (kind, names) in [
                (AttrCategory::Color, &dsaa_core::world::COLOR_NAMES[..]),
                (AttrCategory::Material, &dsaa_core::world::MATERIAL_NAMES[..]),
                (AttrCategory::Pattern, &dsaa_core::world::PATTERN_NAMES[..]),
                (
                    AttrCategory::Transparency,
                    &dsaa_core::world::TRANSPARENCY_NAMES[..],
                ),
            ] {
                self.extraction.lexicon.insert(
                    kind.name().to_string(),
                    names.iter().map(|s| s.to_string()).collect(),
                );
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.world
            .to_core()
            .validate_dims()
            .map_err(invalid)?;
        self.data
            .to_core()
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        self.encoder_cfg(1)
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        if self.encoder.dim != self.world.text_dim {
            return Err(invalid(format!(
                "encoder dim {} must match world text_dim {}: region projections \
                 and caption embeddings share that space",
                self.encoder.dim, self.world.text_dim
            )));
        }
        if self.dsaa.apa_bottleneck >= self.encoder.dim
            || self.dsaa.mod_bottleneck >= self.encoder.dim
        {
            return Err(invalid(format!(
                "adapter bottlenecks ({}, {}) must be below the encoder dim {}",
                self.dsaa.apa_bottleneck, self.dsaa.mod_bottleneck, self.encoder.dim
            )));
        }
        let gamma_ok = |g: f64| g.is_finite() && g > 0.0;
        if !gamma_ok(self.dsaa.gamma_k) || !gamma_ok(self.dsaa.gamma_v) {
            return Err(invalid("modulator gammas must be positive"));
        }
        self.losses
            .to_core()
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        if self.training.optimizer != "adamw" {
            return Err(invalid(format!(
                "unknown optimizer {:?}; only \"adamw\" is implemented",
                self.training.optimizer
            )));
        }
        if self.training.checkpoint_interval == 0 {
            return Err(invalid("checkpoint_interval must be positive"));
        }
        self.train_config()
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        self.extraction_config()?
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        if !(self.eval.nms_iou > 0.0 && self.eval.nms_iou < 1.0) {
            return Err(invalid(format!(
                "nms_iou must lie strictly inside (0, 1), got {}",
                self.eval.nms_iou
            )));
        }
        Ok(())
    }

    pub fn encoder_cfg(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            num_layers: self.encoder.num_layers,
            num_heads: self.encoder.num_heads,
            dim: self.encoder.dim,
            ff_dim: self.encoder.ff_dim,
            max_len: self.encoder.max_len,
            modulated_layers: self.dsaa.modulated_layers.clone(),
            modulate_prefixes: self.dsaa.modulate_prefixes,
            ln_eps: self.encoder.ln_eps,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.training.steps,
            batch_size: self.training.batch_size,
            lr: self.training.lr,
            weight_decay: self.training.weight_decay,
            beta1: self.training.beta1,
            beta2: self.training.beta2,
            adam_eps: self.training.adam_eps,
            seed: self.seed,
            loss: self.losses.to_core(),
        }
    }

    pub fn extraction_config(&self) -> Result<ExtractionConfig, ConfigError> {
        let mode = match self.extraction.mode.as_str() {
            "lexicon" => ExtractionMode::Lexicon,
            "remote" => ExtractionMode::Remote,
            other => {
                return Err(invalid(format!(
                    "extraction mode must be \"lexicon\" or \"remote\", got {other:?}"
                )))
            }
        };
        let mut entries = Vec::new();
        for kind in AttrCategory::ALL {
            if let Some(phrases) = self.extraction.lexicon.get(kind.name()) {
                entries.push((kind, phrases.clone()));
            }
        }
        let known: usize = entries.iter().map(|(_, p)| p.len()).sum();
        let given: usize = self.extraction.lexicon.values().map(|p| p.len()).sum();
        if known != given {
            let bad: Vec<&String> = self
                .extraction
                .lexicon
                .keys()
                .filter(|k| AttrCategory::ALL.iter().all(|c| c.name() != k.as_str()))
                .collect();
            return Err(invalid(format!(
                "unknown lexicon categories {bad:?}; expected color, material, pattern, transparency"
            )));
        }
        Ok(ExtractionConfig {
            mode,
            lexicon: Lexicon { entries },
            endpoint: self.extraction.endpoint.clone(),
            prompt_template: self.extraction.prompt_template.clone(),
            timeout_ms: self.extraction.timeout_ms,
            retries: self.extraction.retries,
        })
    }

    /// Canonical serialized form; every artifact embeds its hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Copy with [paths] reset to defaults: where files land does not change
    /// what an experiment computes, so it must not change its identity. This
    /// is the form hashed into digests and embedded in checkpoints.
    pub fn portable(&self) -> RunConfig {
        let mut projected = self.clone();
        projected.paths = PathsSection::default();
        projected
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.portable().canonical_json().as_bytes())
    }

    /// Hash over the sections that determine dataset content, so training
    /// and evaluation can verify a dataset matches without pinning the
    /// unrelated sections.
    pub fn data_digest(&self) -> String {
        let doc = serde_json::json!({
            "seed": self.seed,
            "world": self.world,
            "data": self.data,
        });
        sha256_hex(doc.to_string().as_bytes())
    }

    pub fn data_dir(&self) -> PathBuf {
        PathBuf::from(&self.paths.data_dir)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.paths.out_dir)
    }
}

trait ValidateDims {
    fn validate_dims(&self) -> Result<(), String>;
}

impl ValidateDims for WorldConfig {
    fn validate_dims(&self) -> Result<(), String> {
        if self.feature_dim == 0 || self.text_dim == 0 {
            return Err("world dimensions must be positive".into());
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err("noise_std must be non-negative".into());
        }
        Ok(())
    }
}
