//! Experiment configuration: a flat-section TOML file with per-env presets.
//!
//! Resolution order: built-in preset defaults, then the config file, then CLI
//! flags (flags win, handled by the CLI layer). `DHAL_SEED` supplies the root
//! seed when neither file nor flag sets one. Unknown keys are rejected.

use crate::dha::DhaConfig;
use crate::envs::ball::{ball_generate, BALL_ACT_DIM, BALL_CONTACT_DIM, BALL_OBS_DIM};
use crate::envs::cart::{
    cart_generate, CartParams, CART_ACT_DIM, CART_CONTACT_DIM, CART_OBS_DIM,
};
use crate::envs::dataset::Transition;
use crate::envs::slds::{slds_generate, InputPolicy, SldsSpec};
use crate::error::{DhalError, Result};
use crate::ppo::PpoConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const ENV_NAMES: [&str; 3] = ["slds2", "ball", "cart"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub name: String,
    pub episodes: usize,
    pub steps: usize,
    pub noise_scale: f64,
    pub cart: CartParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            name: "slds2".into(),
            episodes: 200,
            steps: 100,
            // Drive noise: enough excitation to identify the dynamics while
            // staying far below the mode-conflict prediction error (the
            // current input is unobservable at prediction time).
            noise_scale: 0.1,
            cart: CartParams::default(),
        }
    }
}

impl EnvConfig {
    /// (obs_dim, act_dim, contact_dim) for the named env.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        match self.name.as_str() {
            "slds2" => {
                let s = SldsSpec::default_two_mode();
                Ok((s.state_dim, s.input_dim, 0))
            }
            "ball" => Ok((BALL_OBS_DIM, BALL_ACT_DIM, BALL_CONTACT_DIM)),
            "cart" => Ok((CART_OBS_DIM, CART_ACT_DIM, CART_CONTACT_DIM)),
            other => Err(DhalError::Config(format!(
                "unknown env {other:?}; expected one of {ENV_NAMES:?}"
            ))),
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Vec<Transition>> {
        match self.name.as_str() {
            "slds2" => slds_generate(
                &SldsSpec::default_two_mode(),
                self.episodes,
                self.steps,
                InputPolicy::Noise,
                self.noise_scale,
                seed,
            ),
            "ball" => ball_generate(self.episodes, self.steps, seed),
            "cart" => cart_generate(&self.cart, self.episodes, self.steps, self.noise_scale, seed),
            other => Err(DhalError::Config(format!(
                "unknown env {other:?}; expected one of {ENV_NAMES:?}"
            ))),
        }
    }
}

/// DHA architecture and optimization settings; architecture fields mirror
/// `DhaConfig`, the env dims are filled in from the dataset at build time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DhaTrainConfig {
    pub k: usize,
    pub window: usize,
    pub latent_dim: usize,
    pub beta_kl: f32,
    pub w_entropy: f32,
    pub selector_hidden: Vec<usize>,
    pub encoder_channels: [usize; 2],
    pub decoder_hidden: Vec<usize>,
    pub linear_heads: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
}

impl Default for DhaTrainConfig {
    fn default() -> Self {
        let d = DhaConfig::defaults(3, 1, 0, 0);
        DhaTrainConfig {
            k: d.k,
            window: d.window,
            latent_dim: d.latent_dim,
            beta_kl: d.beta_kl,
            w_entropy: d.w_entropy,
            selector_hidden: d.selector_hidden,
            encoder_channels: d.encoder_channels,
            decoder_hidden: d.decoder_hidden,
            linear_heads: d.linear_heads,
            epochs: 15,
            batch_size: 256,
            lr: 1e-3,
        }
    }
}

impl DhaTrainConfig {
    /// Small-network preset for CPU-budget runs.
    pub fn desk() -> Self {
        let d = DhaConfig::desk(3, 1, 0, 0);
        DhaTrainConfig {
            selector_hidden: d.selector_hidden,
            encoder_channels: d.encoder_channels,
            latent_dim: d.latent_dim,
            decoder_hidden: d.decoder_hidden,
            ..Self::default()
        }
    }

    pub fn dha_config(&self, obs_dim: usize, act_dim: usize, contact_dim: usize) -> DhaConfig {
        DhaConfig {
            k: self.k,
            obs_dim,
            act_dim,
            contact_dim,
            window: self.window,
            latent_dim: self.latent_dim,
            beta_kl: self.beta_kl,
            w_entropy: self.w_entropy,
            selector_hidden: self.selector_hidden.clone(),
            encoder_channels: self.encoder_channels,
            decoder_hidden: self.decoder_hidden.clone(),
            linear_heads: self.linear_heads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    pub env: EnvConfig,
    pub dha: DhaTrainConfig,
    pub ppo: PpoConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: default_seed(),
            out_dir: "out".into(),
            env: EnvConfig::default(),
            dha: DhaTrainConfig::default(),
            ppo: PpoConfig::default(),
        }
    }
}

/// `DHAL_SEED` when set and parseable, else 0.
pub fn default_seed() -> u64 {
    std::env::var("DHAL_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0)
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.env.name = name.to_string();
        match name {
            "slds2" => {}
            "ball" => {
                cfg.env.episodes = 100;
                cfg.env.steps = 150;
            }
            "cart" => {
                cfg.env.episodes = 50;
                cfg.env.steps = 200;
                cfg.env.noise_scale = 0.3;
                cfg.dha = DhaTrainConfig::desk();
            }
            other => {
                return Err(DhalError::Config(format!(
                    "unknown env {other:?}; expected one of {ENV_NAMES:?}"
                )))
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| DhalError::Config(format!("bad config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for name in ENV_NAMES {
            let cfg = ExperimentConfig::preset(name).unwrap();
            let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
            assert_eq!(cfg, back, "preset {name}");
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = ExperimentConfig::default().to_toml();
        text.push_str("\nnot_a_key = 1\n");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(DhalError::Config(_))));
        assert!(ExperimentConfig::from_toml("[dha]\nwidth = 3\n").is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 9\n[dha]\nk = 2\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.dha.k, 2);
        assert_eq!(cfg.dha.window, 20);
        assert_eq!(cfg.env.name, "slds2");
    }

    #[test]
    fn unknown_env_is_config_error() {
        assert!(matches!(ExperimentConfig::preset("moon"), Err(DhalError::Config(_))));
        let e = EnvConfig { name: "moon".into(), ..EnvConfig::default() };
        assert!(e.dims().is_err());
        assert!(e.generate(0).is_err());
    }

    #[test]
    fn env_dims_match_generated_data() {
        for name in ENV_NAMES {
            let mut e = EnvConfig { name: name.into(), ..EnvConfig::default() };
            e.episodes = 1;
            e.steps = 5;
            let (obs, act, contact) = e.dims().unwrap();
            let data = e.generate(3).unwrap();
            assert_eq!(data[0].obs.len(), obs);
            assert_eq!(data[0].action.len(), act);
            assert_eq!(data[0].contacts.len(), contact);
        }
    }
}
