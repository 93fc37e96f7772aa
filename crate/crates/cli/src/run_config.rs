//! Flat run configuration: file, then `--set` overrides, then `--seed`.

use std::path::Path;

use nextloc::config::ModelConfig;
use nextloc::data::DataConfig;
use nextloc::eval::LinearConfig;
use nextloc::train::TrainConfig;
use nextloc::{Error, Result};
use serde::{Deserialize, Serialize};

/// Every tunable of a run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model width; a multiple of 4 and of `heads`.
    pub d_model: usize,
    /// Trajectory-tower blocks.
    pub layers: usize,
    pub heads: usize,
    pub experts: usize,
    /// Experts used per token.
    pub top_k: usize,
    /// Expert hidden width; 0 means 4 * d_model.
    pub expert_hidden: usize,
    pub cross_layers: usize,
    /// Deep-branch hidden width; 0 means 2 * d_model.
    pub deep_hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    /// Run seed for initialization, batch order and gate noise.
    pub seed: u64,
    /// Gate noise during training.
    pub gate_noise: bool,
    /// Sliding-window length in days.
    pub window_days: u32,
    /// Windows with fewer stays are dropped.
    pub min_points: usize,
    /// Longest padded sequence, end token included.
    pub max_seq_len: usize,
    /// Seed of the user split.
    pub split_seed: u64,
    pub baseline_lr: f64,
    pub baseline_epochs: usize,
    /// Seeds used by `compare`.
    pub compare_seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let d = DataConfig::default();
        let l = LinearConfig::default();
        RunConfig {
            d_model: m.d_model,
            layers: m.layers,
            heads: m.heads,
            experts: m.experts,
            top_k: m.top_k,
            expert_hidden: m.expert_hidden,
            cross_layers: m.cross_layers,
            deep_hidden: m.deep_hidden,
            lr: t.lr,
            epochs: t.epochs,
            patience: t.patience,
            batch_size: t.batch_size,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            weight_decay: t.weight_decay,
            clip_norm: t.clip_norm,
            seed: t.seed,
            gate_noise: t.gate_noise,
            window_days: d.window_days,
            min_points: d.min_points,
            max_seq_len: d.max_seq_len,
            split_seed: d.split_seed,
            baseline_lr: l.lr,
            baseline_epochs: l.epochs,
            compare_seeds: vec![1, 2, 3],
        }
    }
}

impl RunConfig {
    /// Merges an optional file with `key=value` overrides (values in TOML
    /// syntax; bare words are taken as strings) and an optional seed.
    pub fn resolve(file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for s in sets {
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
            let key = key.trim();
            let value = value.trim();
            let parsed = format!("v = {value}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.to_string()));
            table.insert(key.to_string(), parsed);
        }
        if let Some(seed) = seed {
            table.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train().validate()?;
        if self.window_days == 0 || self.max_seq_len < 2 || self.min_points < 2 {
            return Err(Error::Config(
                "window_days must be >= 1, max_seq_len and min_points >= 2".into(),
            ));
        }
        if self.baseline_epochs == 0 || !(self.baseline_lr > 0.0) {
            return Err(Error::Config(
                "baseline_lr and baseline_epochs must be positive".into(),
            ));
        }
        if self.compare_seeds.is_empty() {
            return Err(Error::Config("compare_seeds is empty".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            experts: self.experts,
            top_k: self.top_k,
            expert_hidden: self.expert_hidden,
            cross_layers: self.cross_layers,
            deep_hidden: self.deep_hidden,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs: self.epochs,
            patience: self.patience,
            batch_size: self.batch_size,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
            seed: self.seed,
            gate_noise: self.gate_noise,
        }
    }

    pub fn data(&self) -> DataConfig {
        DataConfig {
            window_days: self.window_days,
            min_points: self.min_points,
            max_seq_len: self.max_seq_len,
            split_seed: self.split_seed,
        }
    }

    pub fn linear(&self) -> LinearConfig {
        LinearConfig {
            lr: self.baseline_lr,
            epochs: self.baseline_epochs,
            seed: self.seed,
            ..LinearConfig::default()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Writes the resolved config as `config.toml` under `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let p = dir.join("config.toml");
        std::fs::write(&p, self.to_toml()).map_err(|e| Error::Io { path: p, source: e })
    }
}
