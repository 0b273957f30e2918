//! Run configuration: a flat key/value table with every key optional.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MixerKind, ModelConfig};

use super::loss::MatchingScope;
use super::mask::MaskStrategy;

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

/// Objective settings consumed by a training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub lambda: f64,
    pub stages: usize,
    pub mask_ratio: f64,
    pub mask_strategy: MaskStrategy,
    pub matching_scope: MatchingScope,
    pub smooth_l1_beta: f64,
    /// Include the activation-matching term.
    pub act_loss: bool,
    /// Include the masked-prediction term.
    pub mask_loss: bool,
    pub optim: OptimConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 1.0,
            stages: 4,
            mask_ratio: 0.75,
            mask_strategy: MaskStrategy::TokenWise,
            matching_scope: MatchingScope::VisibleOnly,
            smooth_l1_beta: 1.0,
            act_loss: true,
            mask_loss: true,
            optim: OptimConfig {
                lr: 1.5e-3,
                min_lr: 1e-5,
                weight_decay: 0.05,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                warmup_steps: 20,
                total_steps: 500,
            },
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if self.stages == 0 {
            return bad("stages must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio must lie in [0, 1], got {}", self.mask_ratio));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return bad(format!("smooth_l1_beta must be positive, got {}", self.smooth_l1_beta));
        }
        if !self.act_loss && !self.mask_loss {
            return bad("at least one of act_loss and mask_loss must be enabled".into());
        }
        if self.mask_loss && self.mask_ratio == 0.0 {
            return bad("mask_loss needs a nonzero mask_ratio".into());
        }
        let o = &self.optim;
        if o.min_lr < 0.0 || o.min_lr > o.lr || o.weight_decay < 0.0 {
            return bad("need 0 <= min_lr <= lr and nonnegative weight decay".into());
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }
}

/// Everything a distillation run needs, as one flat table. Every key is
/// optional in a config file; missing keys keep the toy defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub use_class_token: bool,

    pub teacher_dim: usize,
    pub teacher_mlp_dim: usize,
    pub teacher_blocks: usize,
    /// Path to a teacher checkpoint; empty means build one locally.
    pub teacher_checkpoint: String,
    /// Supervised steps on synthetic shape labels before distillation.
    pub teacher_pretrain_steps: usize,
    pub teacher_pretrain_lr: f64,

    pub student_dim: usize,
    pub student_mlp_dim: usize,
    pub student_blocks: usize,

    /// Number of synthetic images in the training pool.
    pub dataset_size: usize,
    /// Number of pool images held fixed for the alignment probe.
    pub probe_size: usize,

    pub steps: usize,
    pub batch_size: usize,
    pub log_every: usize,

    pub lambda: f64,
    pub stages: usize,
    pub mask_ratio: f64,
    pub mask_strategy: MaskStrategy,
    pub matching_scope: MatchingScope,
    pub smooth_l1_beta: f64,
    pub act_loss: bool,
    pub mask_loss: bool,

    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl RunConfig {
    /// 32×32 images, 4×4 patches, d=64, four blocks on each side, two stages.
    pub fn toy() -> Self {
        let t = ModelConfig::toy_teacher();
        let s = ModelConfig::toy_student();
        let d = DistillConfig::default();
        RunConfig {
            seed: 0,
            image_size: t.image_size,
            patch_size: t.patch_size,
            channels: t.channels,
            use_class_token: t.use_class_token,
            teacher_dim: t.embed_dim,
            teacher_mlp_dim: t.mlp_dim,
            teacher_blocks: t.num_blocks,
            teacher_checkpoint: String::new(),
            teacher_pretrain_steps: 150,
            teacher_pretrain_lr: 1e-3,
            student_dim: s.embed_dim,
            student_mlp_dim: s.mlp_dim,
            student_blocks: s.num_blocks,
            dataset_size: 256,
            probe_size: 8,
            steps: d.optim.total_steps,
            batch_size: 16,
            log_every: 10,
            lambda: d.lambda,
            stages: 2,
            mask_ratio: d.mask_ratio,
            mask_strategy: d.mask_strategy,
            matching_scope: d.matching_scope,
            smooth_l1_beta: d.smooth_l1_beta,
            act_loss: d.act_loss,
            mask_loss: d.mask_loss,
            lr: d.optim.lr,
            min_lr: d.optim.min_lr,
            weight_decay: d.optim.weight_decay,
            beta1: d.optim.beta1,
            beta2: d.optim.beta2,
            adam_eps: d.optim.eps,
            warmup_steps: d.optim.warmup_steps,
        }
    }

    /// Names of every accepted key.
    pub fn keys() -> Vec<String> {
        match toml::Table::try_from(RunConfig::toy()) {
            Ok(t) => t.keys().cloned().collect(),
            Err(_) => Vec::new(),
        }
    }

    /// Parses a flat TOML table. Unknown keys are reported together by name.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        let mut cfg = RunConfig::toy();
        cfg.merge(table)?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Applies `key=value` overrides. Values are read as TOML literals, and
    /// bare words fall back to strings (`mask_strategy=block_wise`).
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut table = toml::Table::new();
        for item in overrides {
            let item = item.as_ref();
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            let key = key.trim();
            let value = value.trim();
            let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.to_string()));
            table.insert(key.to_string(), parsed);
        }
        self.merge(table)
    }

    fn merge(&mut self, overlay: toml::Table) -> Result<()> {
        let known = Self::keys();
        let unknown: Vec<&str> = overlay
            .keys()
            .filter(|k| !known.contains(k))
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )));
        }
        let mut base = toml::Table::try_from(&*self)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))?;
        for (k, v) in overlay {
            base.insert(k, v);
        }
        *self = base
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config value: {e}")))?;
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn teacher_model(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.teacher_dim,
            mlp_dim: self.teacher_mlp_dim,
            num_blocks: self.teacher_blocks,
            patch_size: self.patch_size,
            image_size: self.image_size,
            channels: self.channels,
            mixer: MixerKind::Attention,
            use_class_token: self.use_class_token,
        }
    }

    pub fn student_model(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.student_dim,
            mlp_dim: self.student_mlp_dim,
            num_blocks: self.student_blocks,
            mixer: MixerKind::Mamba2,
            ..self.teacher_model()
        }
    }

    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            lambda: self.lambda,
            stages: self.stages,
            mask_ratio: self.mask_ratio,
            mask_strategy: self.mask_strategy,
            matching_scope: self.matching_scope,
            smooth_l1_beta: self.smooth_l1_beta,
            act_loss: self.act_loss,
            mask_loss: self.mask_loss,
            optim: OptimConfig {
                lr: self.lr,
                min_lr: self.min_lr,
                weight_decay: self.weight_decay,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                warmup_steps: self.warmup_steps,
                total_steps: self.steps,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.teacher_model().validate()?;
        self.student_model().validate()?;
        self.distill().validate()?;
        if self.matching_scope == MatchingScope::ClassOnly {
            super::train::class_only_compatible(self.use_class_token, self.teacher_dim, self.student_dim)?;
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        if self.dataset_size == 0 || self.probe_size == 0 || self.probe_size > self.dataset_size {
            return Err(Error::Config(
                "probe_size must lie in 1..=dataset_size".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let d = DistillConfig::default();
        assert_eq!((d.lambda, d.stages, d.mask_ratio), (1.0, 4, 0.75));
        assert_eq!(d.optim.weight_decay, 0.05);
        assert_eq!((d.optim.beta1, d.optim.beta2), (0.9, 0.999));
        let toy = RunConfig::toy();
        assert_eq!((toy.image_size, toy.patch_size, toy.teacher_dim), (32, 4, 64));
        assert_eq!((toy.teacher_blocks, toy.student_blocks, toy.stages), (4, 4, 2));
        assert_eq!((toy.steps, toy.batch_size), (500, 16));
        toy.validate().unwrap();
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::from_toml_str("steps = 7\nmask_strategy = \"block_wise\"\nlr = 1\n").unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.mask_strategy, MaskStrategy::BlockWise);
        assert_eq!(cfg.lr, 1.0);
        assert_eq!(cfg.batch_size, 16);
    }

    #[test]
    fn unknown_keys_are_listed() {
        let err = RunConfig::from_toml_str("stepz = 1\nsteps = 2\nlamda = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("stepz") && msg.contains("lamda"), "{msg}");
        assert!(!msg.contains("steps,"), "{msg}");
    }

    #[test]
    fn overrides_win_and_parse_bare_words() {
        let mut cfg = RunConfig::from_toml_str("steps = 7").unwrap();
        cfg.apply_overrides(&["steps=3", "matching_scope=all", "lambda = 2.5"]).unwrap();
        assert_eq!(cfg.steps, 3);
        assert_eq!(cfg.matching_scope, MatchingScope::All);
        assert_eq!(cfg.lambda, 2.5);
        assert!(cfg.apply_overrides(&["nope=1"]).is_err());
        assert!(cfg.apply_overrides(&["steps=abc"]).is_err());
        assert!(cfg.apply_overrides(&["steps"]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::toy();
        cfg.lr = 0.1 + 0.2;
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_rejects_bad_values() {
        for over in ["lambda=0", "mask_ratio=1.5", "stages=0", "batch_size=0", "probe_size=999"] {
            let mut cfg = RunConfig::toy();
            cfg.apply_overrides(&[over]).unwrap();
            assert!(cfg.validate().is_err(), "{over}");
        }
        let mut cfg = RunConfig::toy();
        cfg.apply_overrides(&["act_loss=false", "mask_loss=false"]).unwrap();
        assert!(cfg.validate().is_err());
    }
}
