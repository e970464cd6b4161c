//! Run configuration: presets, JSON overrides, validation, and hashing.
//!
//! A config file is a JSON object with a required `"preset"` key plus
//! sparse overrides; unknown keys are rejected so ablation typos fail
//! before any compute starts. The resolved [`RunConfig`] is embedded into
//! checkpoints and hashed (FNV-1a over its canonical JSON) for artifact
//! identity checks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::UNetConfig;
use crate::encoders::EncoderDims;
use crate::error::MqError;
use crate::fecom::{FeComDims, LayerNormPlacement};
use crate::qttn::QttnDims;
use crate::rng::fnv1a64;
use crate::synthdata::CorpusSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Adapter-phase learning rate.
    pub lr: f64,
    /// Adapter-phase steps.
    pub steps: usize,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Backbone pretraining steps (unconditional, before freezing).
    pub base_steps: usize,
    pub base_lr: f64,
    /// Loss log cadence, in steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2.5e-4,
            steps: 5000,
            batch: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            base_steps: 2500,
            base_lr: 1e-3,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_first: f64,
    pub beta_last: f64,
    /// Deterministic sampler steps.
    pub sample_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            timesteps: 1000,
            beta_first: 8.5e-4,
            beta_last: 0.012,
            sample_steps: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    /// Held-out scenes for count-match evaluation.
    pub scenes: usize,
    /// Seed block for the held-out scenes; disjoint from the corpus seeds.
    pub seed: u64,
    /// Seed block for the sampler's initial noise.
    pub z0_seed: u64,
    /// Counting-oracle binarization threshold.
    pub threshold: f32,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            scenes: 200,
            seed: 900_000,
            z0_seed: 700_000,
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub enc: EncoderDims,
    pub fecom: FeComDims,
    pub fecom_enabled: bool,
    pub qttn_enabled: bool,
    pub qttn_heads: usize,
    pub qttn_ctx: usize,
    pub unet: UNetConfig,
    pub layernorm: LayerNormPlacement,
    pub extraction: bool,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub lambda: f64,
    pub beta: f64,
    pub corpus: CorpusSpec,
    pub eval: EvalSpec,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            preset: "desk".to_string(),
            seed: 7,
            enc: EncoderDims {
                l_t: 16,
                d_t: 64,
                d_i: 128,
            },
            fecom: FeComDims::desk(),
            fecom_enabled: true,
            qttn_enabled: true,
            qttn_heads: 8,
            qttn_ctx: 4,
            unet: UNetConfig::desk(),
            layernorm: LayerNormPlacement::Canonical,
            extraction: true,
            train: TrainConfig::default(),
            schedule: ScheduleConfig::default(),
            lambda: 1.0,
            beta: 1.0,
            corpus: CorpusSpec {
                size: 1000,
                count_min: 3,
                count_max: 9,
                classes: 6,
                seed: 100_000,
            },
            eval: EvalSpec::default(),
        }
    }

    /// Shape-conformance preset mirroring the reference dims; not meant
    /// to be trained.
    pub fn paper_reference() -> Self {
        RunConfig {
            preset: "paper-reference".to_string(),
            enc: EncoderDims {
                l_t: 77,
                d_t: 2048,
                d_i: 1280,
            },
            fecom: FeComDims::paper_reference(),
            qttn_heads: 20,
            qttn_ctx: 4,
            unet: UNetConfig::paper_reference(),
            ..RunConfig::desk()
        }
    }

    pub fn from_preset(name: &str) -> Result<Self, MqError> {
        match name {
            "desk" => Ok(RunConfig::desk()),
            "paper-reference" => Ok(RunConfig::paper_reference()),
            other => Err(MqError::config(format!(
                "unknown preset {other:?} (expected \"desk\" or \"paper-reference\")"
            ))),
        }
    }

    /// Per-block quantity-attention dims for an injection block.
    pub fn qttn_dims_for_block(&self, block1: usize) -> Result<QttnDims, MqError> {
        QttnDims::for_block_width(
            self.qttn_heads,
            self.qttn_ctx,
            self.enc.d_i,
            self.unet.block(block1).width,
        )
    }

    pub fn validate(&self) -> Result<(), MqError> {
        self.fecom.validate()?;
        self.unet.validate()?;
        self.corpus.validate()?;
        if self.fecom.l_t != self.enc.l_t
            || self.fecom.d_t != self.enc.d_t
            || self.fecom.d_i != self.enc.d_i
        {
            return Err(MqError::config(
                "feature-compensation dims must match the encoder dims",
            ));
        }
        if self.qttn_enabled {
            if self.unet.injection.is_empty() {
                return Err(MqError::config(
                    "quantity attention enabled but the injection set is empty",
                ));
            }
            for &k in &self.unet.injection {
                self.qttn_dims_for_block(k)?;
            }
        } else if !self.unet.injection.is_empty() {
            return Err(MqError::config(
                "injection set must be empty when quantity attention is disabled",
            ));
        }
        if !self.lambda.is_finite() || !self.beta.is_finite() {
            return Err(MqError::config("lambda and beta must be finite"));
        }
        if self.train.lr <= 0.0
            || self.train.batch == 0
            || self.train.log_every == 0
            || self.train.base_lr <= 0.0
        {
            return Err(MqError::config("training config must be positive"));
        }
        let s = &self.schedule;
        if !(s.beta_first > 0.0 && s.beta_first < s.beta_last && s.beta_last < 1.0) {
            return Err(MqError::config(
                "schedule requires 0 < beta_first < beta_last < 1",
            ));
        }
        if s.timesteps < 2 || s.sample_steps == 0 || s.sample_steps > s.timesteps {
            return Err(MqError::config("schedule steps out of range"));
        }
        if self.eval.scenes == 0 || !(0.0..=1.0).contains(&(self.eval.threshold as f64)) {
            return Err(MqError::config("eval spec out of range"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// FNV-1a over the canonical JSON form.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_json().as_bytes())
    }

    pub fn from_embedded_json(json: &str) -> Result<Self, MqError> {
        let cfg: RunConfig = serde_json::from_str(json)
            .map_err(|e| MqError::format(format!("embedded config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

// ── Config files: preset + sparse overrides ───────────────────────────

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainOverride {
    lr: Option<f64>,
    steps: Option<usize>,
    batch: Option<usize>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    eps: Option<f64>,
    base_steps: Option<usize>,
    base_lr: Option<f64>,
    log_every: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleOverride {
    timesteps: Option<usize>,
    beta_first: Option<f64>,
    beta_last: Option<f64>,
    sample_steps: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusOverride {
    size: Option<usize>,
    count_min: Option<usize>,
    count_max: Option<usize>,
    classes: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalOverride {
    scenes: Option<usize>,
    seed: Option<u64>,
    z0_seed: Option<u64>,
    threshold: Option<f32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    preset: String,
    seed: Option<u64>,
    lambda: Option<f64>,
    beta: Option<f64>,
    layernorm: Option<LayerNormPlacement>,
    extraction: Option<bool>,
    fecom_enabled: Option<bool>,
    qttn_enabled: Option<bool>,
    injection: Option<Vec<usize>>,
    qttn_heads: Option<usize>,
    qttn_ctx: Option<usize>,
    #[serde(default)]
    train: TrainOverride,
    #[serde(default)]
    schedule: ScheduleOverride,
    #[serde(default)]
    corpus: CorpusOverride,
    #[serde(default)]
    eval: EvalOverride,
}

macro_rules! take {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

pub fn parse_config(json: &str) -> Result<RunConfig, MqError> {
    let file: ConfigFile =
        serde_json::from_str(json).map_err(|e| MqError::config(format!("config: {e}")))?;
    let mut cfg = RunConfig::from_preset(&file.preset)?;
    take!(cfg.seed, file.seed);
    take!(cfg.lambda, file.lambda);
    take!(cfg.beta, file.beta);
    take!(cfg.layernorm, file.layernorm);
    take!(cfg.extraction, file.extraction);
    take!(cfg.fecom_enabled, file.fecom_enabled);
    take!(cfg.qttn_enabled, file.qttn_enabled);
    take!(cfg.unet.injection, file.injection);
    take!(cfg.qttn_heads, file.qttn_heads);
    take!(cfg.qttn_ctx, file.qttn_ctx);
    take!(cfg.train.lr, file.train.lr);
    take!(cfg.train.steps, file.train.steps);
    take!(cfg.train.batch, file.train.batch);
    take!(cfg.train.beta1, file.train.beta1);
    take!(cfg.train.beta2, file.train.beta2);
    take!(cfg.train.eps, file.train.eps);
    take!(cfg.train.base_steps, file.train.base_steps);
    take!(cfg.train.base_lr, file.train.base_lr);
    take!(cfg.train.log_every, file.train.log_every);
    take!(cfg.schedule.timesteps, file.schedule.timesteps);
    take!(cfg.schedule.beta_first, file.schedule.beta_first);
    take!(cfg.schedule.beta_last, file.schedule.beta_last);
    take!(cfg.schedule.sample_steps, file.schedule.sample_steps);
    take!(cfg.corpus.size, file.corpus.size);
    take!(cfg.corpus.count_min, file.corpus.count_min);
    take!(cfg.corpus.count_max, file.corpus.count_max);
    take!(cfg.corpus.classes, file.corpus.classes);
    take!(cfg.corpus.seed, file.corpus.seed);
    take!(cfg.eval.scenes, file.eval.scenes);
    take!(cfg.eval.seed, file.eval.seed);
    take!(cfg.eval.z0_seed, file.eval.z0_seed);
    take!(cfg.eval.threshold, file.eval.threshold);
    if !cfg.qttn_enabled {
        cfg.unet.injection.clear();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, MqError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MqError::config(format!("config {}: {e}", path.display())))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::paper_reference().validate().unwrap();
    }

    #[test]
    fn scale_factors_default_to_one() {
        let cfg = RunConfig::desk();
        assert_eq!(cfg.lambda, 1.0);
        assert_eq!(cfg.beta, 1.0);
        assert_eq!(cfg.train.lr, 0.00025);
        assert_eq!(cfg.unet.injection, vec![4]);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = parse_config(r#"{"preset": "desk", "lamda": 0.5}"#).unwrap_err();
        assert!(matches!(err, MqError::Config(_)), "{err}");
        let err = parse_config(r#"{"preset": "desk", "train": {"lrr": 1.0}}"#).unwrap_err();
        assert!(matches!(err, MqError::Config(_)), "{err}");
    }

    #[test]
    fn preset_required_and_checked() {
        assert!(parse_config(r#"{}"#).is_err());
        assert!(parse_config(r#"{"preset": "galactic"}"#).is_err());
    }

    #[test]
    fn overrides_apply() {
        let cfg = parse_config(
            r#"{
                "preset": "desk",
                "seed": 11,
                "lambda": 0.5,
                "injection": [3, 4, 6],
                "layernorm": "m/o",
                "train": {"steps": 10, "batch": 2},
                "corpus": {"size": 20}
            }"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.lambda, 0.5);
        assert_eq!(cfg.unet.injection, vec![3, 4, 6]);
        assert_eq!(cfg.layernorm, LayerNormPlacement::MovedAfterFc);
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.train.batch, 2);
        assert_eq!(cfg.corpus.size, 20);
        // untouched defaults survive
        assert_eq!(cfg.train.lr, 2.5e-4);
    }

    #[test]
    fn head_divisibility_checked_before_compute() {
        // block 1 of the desk net is 64 wide; 24 heads cannot divide it
        let err =
            parse_config(r#"{"preset": "desk", "injection": [1], "qttn_heads": 24}"#).unwrap_err();
        assert!(matches!(err, MqError::Config(_)), "{err}");
    }

    #[test]
    fn qttn_disabled_clears_injection() {
        let cfg = parse_config(r#"{"preset": "desk", "qttn_enabled": false}"#).unwrap();
        assert!(cfg.unet.injection.is_empty());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::desk();
        let b = RunConfig::desk();
        assert_eq!(a.hash(), b.hash());
        let mut c = RunConfig::desk();
        c.lambda = 0.75;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn config_round_trips_through_json() {
        let a = RunConfig::desk();
        let b = RunConfig::from_embedded_json(&a.to_json()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn bad_schedule_rejected() {
        let err = parse_config(
            r#"{"preset": "desk", "schedule": {"beta_first": 0.5, "beta_last": 0.1}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, MqError::Config(_)));
    }
}
