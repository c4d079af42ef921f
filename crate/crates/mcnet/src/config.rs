//! `key = value` run configuration.
//!
//! `profile` picks the base settings (`paper` or `desk`); every other key
//! overrides one field. Lines starting with `#` are comments. Unknown keys
//! are rejected by name.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mcnet_core::objectives::{ConsistencyLevels, LossWeights};
use mcnet_core::optim::AdamConfig;
use mcnet_core::train::LossSettings;
use mcnet_core::ModelConfig;

use crate::error::{AppError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Console progress interval in steps; 0 disables it.
    pub log_every: u64,
    /// Continue from this checkpoint instead of initializing.
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            steps: 5000,
            batch: 8,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            seed: 0,
            precision: Precision::F32,
            checkpoint_every: 500,
            log_every: 100,
            resume: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossSettings,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::for_profile(Profile::Paper)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Paper,
    Desk,
}

impl RunConfig {
    pub fn for_profile(p: Profile) -> Self {
        let model = match p {
            Profile::Paper => ModelConfig::paper(),
            Profile::Desk => ModelConfig::desk(),
        };
        RunConfig { model, loss: LossSettings::default(), train: TrainConfig::default(), data: DataConfig::default() }
    }

    /// Parses a configuration, then applies `overrides` on top.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| AppError::Usage(format!("config line {}: expected key = value, got {raw:?}", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        pairs.extend(overrides.iter().cloned());

        // the profile resets the base, so it is applied before any other key
        let profile = pairs.iter().rev().find(|(k, _)| k == "profile").map(|(_, v)| v.as_str());
        let mut cfg = match profile {
            None | Some("paper") => RunConfig::for_profile(Profile::Paper),
            Some("desk") => RunConfig::for_profile(Profile::Desk),
            Some(other) => return Err(AppError::Usage(format!("profile must be paper or desk, got {other:?}"))),
        };
        for (k, v) in &pairs {
            if k != "profile" {
                cfg.set(k, v)?;
            }
        }
        cfg.model.validate()?;
        cfg.loss.weights.validate()?;
        if cfg.train.batch == 0 {
            return Err(AppError::Usage("train.batch must be at least 1".into()));
        }
        if cfg.train.lr.is_nan() || cfg.train.lr <= 0.0 {
            return Err(AppError::Usage("train.lr must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        RunConfig::parse(&text, overrides)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let w = &mut self.loss.weights;
        let t = &mut self.train;
        match key {
            "model.keypoints" => m.num_keypoints = parse(key, value)?,
            "model.levels" => m.num_levels = parse(key, value)?,
            "model.base_channels" => m.base_channels = parse(key, value)?,
            "model.memory.c" => m.memory_channels = parse(key, value)?,
            "model.memory.h" => m.memory_height = parse(key, value)?,
            "model.memory.w" => m.memory_width = parse(key, value)?,
            "model.image_size" => m.image_size = parse(key, value)?,
            "model.pe_L" => m.pe_levels = parse(key, value)?,
            "model.attention_scaling" => m.attention_scaling = parse(key, value)?,
            "model.occlusion" => m.occlusion = parse(key, value)?,
            "model.query_bias" => m.query_bias = parse(key, value)?,
            "model.n_kernels" => m.n_kernels = parse(key, value)?,
            "model.demod_eps" => m.demod_eps = parse(key, value)?,
            "model.motion_size" => m.motion_size = parse(key, value)?,
            "model.temperature" => m.temperature = parse(key, value)?,
            "model.sigma" => m.sigma = parse(key, value)?,
            "model.detector_widths" => m.detector_widths = parse_list(key, value)?,
            "model.dense_widths" => m.dense_widths = parse_list(key, value)?,
            "loss.lambda_p" => w.perceptual = parse(key, value)?,
            "loss.lambda_eq" => w.equivariance = parse(key, value)?,
            "loss.lambda_dist" => w.distance = parse(key, value)?,
            "loss.lambda_con" => w.consistency = parse(key, value)?,
            "loss.alpha" => self.loss.alpha = parse(key, value)?,
            "loss.consistency_level" => {
                self.loss.consistency = match value {
                    "all" => ConsistencyLevels::All,
                    v => ConsistencyLevels::Only(parse(key, v)?),
                }
            }
            "train.steps" => t.steps = parse(key, value)?,
            "train.batch" => t.batch = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "train.precision" => {
                t.precision = match value {
                    "f32" | "32" => Precision::F32,
                    "f64" | "64" => Precision::F64,
                    _ => return Err(bad(key, value)),
                }
            }
            "train.checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "train.log_every" => t.log_every = parse(key, value)?,
            "train.resume" => t.resume = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data.manifest" => self.data.manifest = Some(PathBuf::from(value)),
            "data.out_dir" => self.data.out_dir = Some(PathBuf::from(value)),
            _ => return Err(AppError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.train.lr, beta1: self.train.beta1, beta2: self.train.beta2, ..AdamConfig::default() }
    }

    pub fn weights(&self) -> LossWeights {
        self.loss.weights
    }
}

fn bad(key: &str, value: &str) -> AppError {
    AppError::Usage(format!("invalid value {value:?} for {key}"))
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| bad(key, value))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|s| parse(key, s.trim())).collect()
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| AppError::Usage(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_full_size_constants() {
        let c = RunConfig::parse("", &[]).unwrap();
        assert_eq!(c.model.num_keypoints, 15);
        assert_eq!(c.model.num_levels, 4);
        assert_eq!((c.model.memory_channels, c.model.memory_height, c.model.memory_width), (512, 32, 32));
        assert_eq!(c.loss.weights, LossWeights::default());
        assert_eq!(c.loss.alpha, 0.2);
    }

    #[test]
    fn profile_applies_before_other_keys() {
        let c = RunConfig::parse("model.keypoints = 7\nprofile = desk\n", &[]).unwrap();
        assert_eq!(c.model.num_keypoints, 7);
        assert_eq!(c.model.image_size, 64);
    }

    #[test]
    fn overrides_win() {
        let c = RunConfig::parse("profile=desk\ntrain.steps=10", &[("train.steps".into(), "3".into())]).unwrap();
        assert_eq!(c.train.steps, 3);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("profile=desk\nmodel.colour = 3\n", &[]).unwrap_err();
        assert!(err.to_string().contains("model.colour"));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        assert!(RunConfig::parse("train.batch = many", &[]).is_err());
        assert!(RunConfig::parse("train.precision = f16", &[]).is_err());
        assert!(RunConfig::parse("profile = huge", &[]).is_err());
        assert!(RunConfig::parse("no equals sign", &[]).is_err());
        assert!(RunConfig::parse("profile=desk\nmodel.image_size = 60", &[]).is_err());
    }
}
