//! Run configuration and its flat `key = value` text form.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! model.depth = 4
//! model.attention = dmsa
//! data.noise = 0.05
//! train.lr = 1e-3
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::error::{invalid, Error, Result};
use crate::sparsify::{ActivationKind, SparsityAxis};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    pub image_size: usize,
    /// Channels per input token. Image inputs need `patch_size²`.
    pub token_dim: usize,
    pub num_classes: usize,
    pub attention: AttentionKind,
    pub sparsity_axis: SparsityAxis,
    pub topk: usize,
    pub activation: ActivationKind,
    /// Rotary embedding on the membership path.
    pub rope: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            dim: 64,
            heads: 8,
            mlp_ratio: 4.0,
            patch_size: 4,
            image_size: 16,
            token_dim: 32,
            num_classes: 4,
            attention: AttentionKind::Dmsa,
            sparsity_axis: SparsityAxis::Head,
            topk: 4,
            activation: ActivationKind::SoftThreshold,
            rope: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(invalid(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads)));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(invalid(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.token_dim == 0 || self.num_classes == 0 {
            return Err(invalid("token_dim and num_classes must be positive"));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return Err(invalid(format!("mlp_ratio must be positive, got {}", self.mlp_ratio)));
        }
        let gated_st = self.attention == AttentionKind::Dmsa
            && self.sparsity_axis.gates_heads()
            && self.activation == ActivationKind::SoftThreshold;
        if gated_st && (self.topk == 0 || self.topk > self.heads) {
            return Err(invalid(format!("topk must be in 1..={}, got {}", self.heads, self.topk)));
        }
        if self.rope && self.dim % 2 != 0 {
            return Err(invalid("rotary embedding needs an even dim"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.mlp_ratio * self.dim as f64).round() as usize
    }

    /// Patches per image side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Non-class tokens per input.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Union-of-subspaces generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub subspace_dim: usize,
    pub noise: f64,
    pub tokens: usize,
    pub samples_per_class: usize,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            dim: 32,
            subspace_dim: 4,
            noise: 0.05,
            tokens: 16,
            samples_per_class: 100,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.subspace_dim == 0 || self.subspace_dim >= self.dim {
            return Err(invalid(format!(
                "subspace dim {} must be in 1..{}",
                self.subspace_dim, self.dim
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(invalid(format!("noise must be finite and nonnegative, got {}", self.noise)));
        }
        if self.num_classes == 0 || self.tokens == 0 {
            return Err(invalid("num_classes and tokens must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of each class held out for evaluation.
    pub holdout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            holdout: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return Err(invalid("lr and eps must be positive, weight_decay nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("betas must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(invalid(format!("holdout must lie in [0, 1), got {}", self.holdout)));
        }
        Ok(())
    }
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: SyntheticDatasetSpec,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()
    }

    pub fn seed(&self) -> u64 {
        self.model.seed
    }

    /// Parses the flat text form on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| invalid(format!("line {}: {}", lineno + 1, strip_prefix(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "seed" | "model.seed" => m.seed = parse(key, value)?,
            "model.depth" => m.depth = parse(key, value)?,
            "model.dim" => m.dim = parse(key, value)?,
            "model.heads" => m.heads = parse(key, value)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "model.patch_size" => m.patch_size = parse(key, value)?,
            "model.image_size" => m.image_size = parse(key, value)?,
            "model.token_dim" => m.token_dim = parse(key, value)?,
            "model.num_classes" => m.num_classes = parse(key, value)?,
            "model.attention" => m.attention = parse(key, value)?,
            "model.sparsity_axis" => m.sparsity_axis = parse(key, value)?,
            "model.topk" => m.topk = parse(key, value)?,
            "model.activation" => m.activation = parse(key, value)?,
            "model.rope" => m.rope = parse(key, value)?,
            "data.num_classes" => d.num_classes = parse(key, value)?,
            "data.dim" => d.dim = parse(key, value)?,
            "data.subspace_dim" => d.subspace_dim = parse(key, value)?,
            "data.noise" => d.noise = parse(key, value)?,
            "data.tokens" => d.tokens = parse(key, value)?,
            "data.samples_per_class" => d.samples_per_class = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.eps" => t.eps = parse(key, value)?,
            "train.holdout" => t.holdout = parse(key, value)?,
            other => return Err(invalid(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Renders every key; [`RunConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let (m, d, t) = (&self.model, &self.data, &self.train);
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("seed", m.seed.to_string());
        line("model.depth", m.depth.to_string());
        line("model.dim", m.dim.to_string());
        line("model.heads", m.heads.to_string());
        line("model.mlp_ratio", format!("{:?}", m.mlp_ratio));
        line("model.patch_size", m.patch_size.to_string());
        line("model.image_size", m.image_size.to_string());
        line("model.token_dim", m.token_dim.to_string());
        line("model.num_classes", m.num_classes.to_string());
        line("model.attention", m.attention.to_string());
        line("model.sparsity_axis", m.sparsity_axis.to_string());
        line("model.topk", m.topk.to_string());
        line("model.activation", m.activation.to_string());
        line("model.rope", m.rope.to_string());
        line("data.num_classes", d.num_classes.to_string());
        line("data.dim", d.dim.to_string());
        line("data.subspace_dim", d.subspace_dim.to_string());
        line("data.noise", format!("{:?}", d.noise));
        line("data.tokens", d.tokens.to_string());
        line("data.samples_per_class", d.samples_per_class.to_string());
        line("train.epochs", t.epochs.to_string());
        line("train.batch_size", t.batch_size.to_string());
        line("train.lr", format!("{:?}", t.lr));
        line("train.weight_decay", format!("{:?}", t.weight_decay));
        line("train.beta1", format!("{:?}", t.beta1));
        line("train.beta2", format!("{:?}", t.beta2));
        line("train.eps", format!("{:?}", t.eps));
        line("train.holdout", format!("{:?}", t.holdout));
        s
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| invalid(format!("bad value '{value}' for '{key}': {e}")))
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::InvalidInput(msg) => msg,
        other => other.to_string(),
    }
}
