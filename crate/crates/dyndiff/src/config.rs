//! Run configuration: defaults, config-file parsing with strict key
//! validation, and config hashing for report provenance.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::ScheduleConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::forecasting::{ModelConfig, TrainConfig};

/// Data-selection settings carried through to checkpoints so evaluation
/// reconstructs the exact split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Target column names; empty means every column is a target.
    pub targets: Vec<String>,
    /// Chronological train/validation/test ratios.
    pub split: [f64; 3],
    /// Window stride.
    pub stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            targets: Vec::new(),
            split: [0.8, 0.1, 0.1],
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastConfig {
    /// Ensemble size `K`.
    pub samples: usize,
    /// Requested forecast horizon `P` (may exceed the model window via
    /// iterative rollout).
    pub horizon: usize,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig {
            samples: 100,
            horizon: 10,
        }
    }
}

/// Union of all module configs plus paths-independent run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub d_model: usize,
    pub encoder_channels: usize,
    pub encoder_layers: usize,
    pub encoder_kernel: usize,
    pub denoiser_heads: usize,
    pub denoiser_res_blocks: usize,
    pub denoiser_ff_dim: usize,
    pub train: TrainConfig,
    pub forecast: ForecastConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schedule: ScheduleConfig::default(),
            d_model: 128,
            encoder_channels: 64,
            encoder_layers: 4,
            encoder_kernel: 3,
            denoiser_heads: 4,
            denoiser_res_blocks: 2,
            denoiser_ff_dim: 256,
            train: TrainConfig::default(),
            forecast: ForecastConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config file and overlays it on the current values. Every key
    /// is validated against the known set; unknown keys are an error.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        let mut pairs = Vec::new();
        flatten("", &toml::Value::Table(table), &mut pairs);
        let mut latent_override: Option<usize> = None;
        for (key, val) in pairs {
            self.apply_key(&key, &val, &mut latent_override)?;
        }
        if let Some(latent) = latent_override {
            if latent != self.d_model {
                return Err(Error::Config(format!(
                    "encoder.latent_dim {latent} must equal model.d_model {}; set model.d_model instead",
                    self.d_model
                )));
            }
        }
        Ok(())
    }

    fn apply_key(
        &mut self,
        key: &str,
        val: &toml::Value,
        latent_override: &mut Option<usize>,
    ) -> Result<()> {
        let as_usize = |v: &toml::Value| -> Result<usize> {
            v.as_integer()
                .filter(|&i| i >= 0)
                .map(|i| i as usize)
                .ok_or_else(|| Error::Config(format!("key {key:?} expects a non-negative integer")))
        };
        let as_u64 = |v: &toml::Value| -> Result<u64> {
            v.as_integer()
                .filter(|&i| i >= 0)
                .map(|i| i as u64)
                .ok_or_else(|| Error::Config(format!("key {key:?} expects a non-negative integer")))
        };
        let as_f64 = |v: &toml::Value| -> Result<f64> {
            v.as_float()
                .or_else(|| v.as_integer().map(|i| i as f64))
                .ok_or_else(|| Error::Config(format!("key {key:?} expects a number")))
        };
        let as_bool = |v: &toml::Value| -> Result<bool> {
            v.as_bool()
                .ok_or_else(|| Error::Config(format!("key {key:?} expects a boolean")))
        };
        match key {
            "schedule.steps" => self.schedule.steps = as_usize(val)?,
            "schedule.beta_min" => self.schedule.beta_min = as_f64(val)?,
            "schedule.beta_max" => self.schedule.beta_max = as_f64(val)?,
            "model.d_model" => self.d_model = as_usize(val)?,
            "encoder.channels" => self.encoder_channels = as_usize(val)?,
            "encoder.layers" => self.encoder_layers = as_usize(val)?,
            "encoder.kernel" => self.encoder_kernel = as_usize(val)?,
            "encoder.latent_dim" => *latent_override = Some(as_usize(val)?),
            "denoiser.heads" => self.denoiser_heads = as_usize(val)?,
            "denoiser.res_blocks" => self.denoiser_res_blocks = as_usize(val)?,
            "denoiser.ff_dim" => self.denoiser_ff_dim = as_usize(val)?,
            "train.lr" => self.train.lr = as_f64(val)?,
            "train.batch" => self.train.batch = as_usize(val)?,
            "train.steps" => self.train.steps = as_usize(val)?,
            "train.seed" => self.train.seed = as_u64(val)?,
            "train.context" => self.train.context = as_usize(val)?,
            "train.horizon" => self.train.horizon = as_usize(val)?,
            "train.unconditional" => self.train.unconditional = as_bool(val)?,
            "train.clip_norm" => self.train.clip_norm = as_f64(val)?,
            "train.eval_interval" => self.train.eval_interval = as_usize(val)?,
            "train.patience" => self.train.patience = as_usize(val)?,
            "forecast.samples" => self.forecast.samples = as_usize(val)?,
            "forecast.horizon" => self.forecast.horizon = as_usize(val)?,
            "data.targets" => {
                let arr = val
                    .as_array()
                    .ok_or_else(|| Error::Config("data.targets expects an array of strings".into()))?;
                self.data.targets = arr
                    .iter()
                    .map(|v| {
                        v.as_str()
                            .map(str::to_string)
                            .ok_or_else(|| Error::Config("data.targets entries must be strings".into()))
                    })
                    .collect::<Result<Vec<String>>>()?;
            }
            "data.split" => {
                let arr = val
                    .as_array()
                    .ok_or_else(|| Error::Config("data.split expects an array of 3 numbers".into()))?;
                if arr.len() != 3 {
                    return Err(Error::Config("data.split expects exactly 3 ratios".into()));
                }
                for (i, v) in arr.iter().enumerate() {
                    self.data.split[i] = v
                        .as_float()
                        .or_else(|| v.as_integer().map(|x| x as f64))
                        .ok_or_else(|| Error::Config("data.split entries must be numbers".into()))?;
                }
            }
            "data.stride" => self.data.stride = as_usize(val)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown config key {other:?} (typo?)"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.forecast.samples < 1 || self.forecast.horizon < 1 {
            return Err(Error::Config(
                "forecast.samples and forecast.horizon must be >= 1".into(),
            ));
        }
        if self.data.stride < 1 {
            return Err(Error::Config("data.stride must be >= 1".into()));
        }
        self.model_config(1, 1).validate()
    }

    /// Materializes the architecture configs for a dataset with `m` input
    /// variables and `n` targets.
    pub fn model_config(&self, in_vars: usize, n_targets: usize) -> ModelConfig {
        ModelConfig {
            schedule: self.schedule.clone(),
            encoder: EncoderConfig {
                in_vars,
                channels: self.encoder_channels,
                layers: self.encoder_layers,
                kernel: self.encoder_kernel,
                dilation_base: 2,
                latent_dim: self.d_model,
            },
            denoiser: DenoiserConfig {
                n_vars: n_targets,
                horizon: self.train.horizon,
                d_model: self.d_model,
                heads: self.denoiser_heads,
                res_blocks: self.denoiser_res_blocks,
                ff_dim: self.denoiser_ff_dim,
            },
        }
    }

    /// Short stable hash of the full configuration.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, toml::Value)>) {
    match value {
        toml::Value::Table(table) => {
            for (k, v) in table {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_shipped_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.schedule.steps, 50);
        assert_eq!(cfg.schedule.beta_min, 1e-4);
        assert_eq!(cfg.schedule.beta_max, 0.5);
        assert_eq!(cfg.d_model, 128);
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.train.batch, 64);
        assert_eq!(cfg.train.context, 120);
        assert_eq!(cfg.train.horizon, 10);
        assert_eq!(cfg.forecast.samples, 100);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn file_values_overlay_defaults() {
        let mut cfg = RunConfig::default();
        cfg.apply_file(
            "train.lr = 0.01\ntrain.batch = 8\nencoder.channels = 16\ndata.targets = [\"value\"]\ndata.split = [0.7, 0.2, 0.1]\nschedule.steps = 20\n",
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.batch, 8);
        assert_eq!(cfg.encoder_channels, 16);
        assert_eq!(cfg.data.targets, vec!["value".to_string()]);
        assert_eq!(cfg.data.split, [0.7, 0.2, 0.1]);
        assert_eq!(cfg.schedule.steps, 20);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_file("train.lrr = 0.01\n").unwrap_err().to_string();
        assert!(err.contains("train.lrr"), "{err}");
        let err = cfg
            .apply_file("[denoiser]\nheadz = 2\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("denoiser.headz"), "{err}");
    }

    #[test]
    fn latent_dim_must_agree_with_d_model() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_file("encoder.latent_dim = 64\n").is_err());
        cfg.apply_file("model.d_model = 64\nencoder.latent_dim = 64\n")
            .unwrap();
        assert_eq!(cfg.d_model, 64);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let b = RunConfig::default();
        assert_eq!(a.config_hash(), b.config_hash());
        let mut c = RunConfig::default();
        c.train.seed = 123;
        assert_ne!(a.config_hash(), c.config_hash());
        assert_eq!(a.config_hash().len(), 16);
    }

    #[test]
    fn model_config_wires_dimensions_through() {
        let cfg = RunConfig::default();
        let mc = cfg.model_config(3, 2);
        assert_eq!(mc.encoder.in_vars, 3);
        assert_eq!(mc.encoder.latent_dim, 128);
        assert_eq!(mc.denoiser.n_vars, 2);
        assert_eq!(mc.denoiser.horizon, cfg.train.horizon);
        assert!(mc.validate().is_ok());
    }
}
