//! Training/run configuration files (JSON, strict schema) and the resolved
//! snapshot every run writes next to its outputs.

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::audio::FeatureConfig;
use crate::error::{CoreError, Result};
use crate::stm::{DecoderKind, FeatureCombination};

pub const RESOLVED_CONFIG_NAME: &str = "config.resolved.json";

/// Parse a strict-schema JSON config file.
pub fn load_config<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))
}

/// Write the effective configuration as `config.resolved.json` under the run
/// directory; re-running from that file reproduces the run.
pub fn write_resolved<T: Serialize>(out_dir: impl AsRef<Path>, config: &T) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    let path = out_dir.join(RESOLVED_CONFIG_NAME);
    let text = serde_json::to_string_pretty(config)
        .map_err(|e| CoreError::Config(format!("serialize resolved config: {e}")))?;
    std::fs::write(&path, text).map_err(|e| CoreError::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AtsTrainConfig {
    pub dataset: String,
    pub out_dir: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub t_max: usize,
    pub dropout: f64,
    pub band_radius: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub loss_velocity: f64,
    pub loss_acceleration: f64,
    pub features: FeatureConfig,
    /// Hard cap on optimizer steps (None = run all epochs).
    pub max_steps: Option<usize>,
    /// Stop once the train positional loss drops below this fraction of its
    /// end-of-first-epoch value.
    pub target_pos_ratio: Option<f64>,
    /// Run the (forward-only) train/val evaluation every this many epochs;
    /// epoch 1 and the final epoch are always evaluated.
    pub eval_every: usize,
    pub workers: usize,
}

impl Default for AtsTrainConfig {
    fn default() -> Self {
        AtsTrainConfig {
            dataset: String::new(),
            out_dir: "runs/ats".into(),
            seed: 0,
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            grad_clip: 1.0,
            d_model: 512,
            n_layers: 6,
            n_heads: 8,
            d_ff: 2048,
            t_max: 600,
            dropout: 0.1,
            band_radius: 2,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            loss_velocity: 0.3,
            loss_acceleration: 0.1,
            features: FeatureConfig::default(),
            max_steps: None,
            target_pos_ratio: None,
            eval_every: 1,
            workers: 1,
        }
    }
}

impl AtsTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_empty() {
            return Err(CoreError::Config("dataset path is required".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(CoreError::Config("learning_rate must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(CoreError::Config("eval_every must be positive".into()));
        }
        if !(0.0 < self.beta_start && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return Err(CoreError::Config("bad diffusion schedule endpoints".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StmTrainConfig {
    pub dataset: String,
    pub out_dir: String,
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub feature_width: usize,
    pub attention_width: usize,
    pub attention_heads: usize,
    pub gcn_layers: usize,
    pub gcn_hidden: usize,
    pub positional_width: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub spectral_k: usize,
    pub gradient_features: bool,
    pub feature_combination: FeatureCombination,
    pub decoder: DecoderKind,
    /// Frames per training window (one optimizer step each).
    pub train_window: usize,
    pub loss_velocity: f64,
    pub loss_acceleration: f64,
    /// Override for the per-channel diffusion-time init; None = mean edge
    /// length squared of the training meshes.
    pub diffusion_time_init: Option<f64>,
    pub max_steps: Option<usize>,
    pub workers: usize,
}

impl Default for StmTrainConfig {
    fn default() -> Self {
        StmTrainConfig {
            dataset: String::new(),
            out_dir: "runs/stm".into(),
            seed: 0,
            epochs: 30,
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            grad_clip: 1.0,
            feature_width: 128,
            attention_width: 128,
            attention_heads: 4,
            gcn_layers: 3,
            gcn_hidden: 128,
            positional_width: 32,
            encoder_blocks: 4,
            decoder_blocks: 4,
            spectral_k: 128,
            gradient_features: false,
            feature_combination: FeatureCombination::Full,
            decoder: DecoderKind::Intrinsic,
            train_window: 10,
            loss_velocity: 0.5,
            loss_acceleration: 0.2,
            diffusion_time_init: None,
            max_steps: None,
            workers: 1,
        }
    }
}

impl StmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_empty() {
            return Err(CoreError::Config("dataset path is required".into()));
        }
        if self.epochs == 0 || self.train_window == 0 {
            return Err(CoreError::Config(
                "epochs and train_window must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(CoreError::Config("learning_rate must be positive".into()));
        }
        if self.spectral_k == 0 {
            return Err(CoreError::Config("spectral_k must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"dataset": "x", "no_such_key": 1}"#).unwrap();
        match load_config::<AtsTrainConfig>(&path) {
            Err(CoreError::Config(msg)) => assert!(msg.contains("no_such_key"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn defaults_fill_missing_fields_and_resolved_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"dataset": "data", "epochs": 3}"#).unwrap();
        let config: AtsTrainConfig = load_config(&path).unwrap();
        assert_eq!(config.epochs, 3);
        assert_eq!(config.batch_size, 16);
        config.validate().unwrap();
        let resolved = write_resolved(dir.path().join("run"), &config).unwrap();
        let back: AtsTrainConfig = load_config(&resolved).unwrap();
        assert_eq!(back.epochs, 3);
        assert_eq!(back.d_model, 512);
    }

    #[test]
    fn stm_config_validation() {
        let mut c = StmTrainConfig::default();
        assert!(c.validate().is_err()); // dataset empty
        c.dataset = "d".into();
        c.validate().unwrap();
        c.train_window = 0;
        assert!(c.validate().is_err());
    }
}
