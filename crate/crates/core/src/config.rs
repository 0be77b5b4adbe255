//! Run configuration: one JSON file drives a whole pipeline run.
//!
//! Unknown keys are rejected so a typo cannot silently fall back to a
//! default. Every numeric field is validated independently and reports its
//! own error variant.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

/// Diffusion backend selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    /// Latent space equals pixel space; exact oracles.
    #[serde(rename = "identity-vae+toy-unet")]
    IdentityVaeToyUnet,
    /// Trained block-linear autoencoder latents.
    #[serde(rename = "toy-vae+toy-unet")]
    ToyVaeToyUnet,
    /// Out-of-process backend speaking the tensor-archive protocol.
    #[serde(rename = "external")]
    External,
}

/// Interpretation of "sum of similarities" in the detection score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimMode {
    /// `sum_j exp(cos/tau)`: strictly positive masses.
    Exponential,
    /// Raw cosine sums; can go negative, kept for comparison runs.
    RawCosine,
}

/// Denominator of the negative-feature loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegDenominator {
    /// Contrast each label against the batch images (printed form).
    Images,
    /// Contrast each image against the learnable labels.
    Labels,
}

/// How context elements are fed to the diffusion text encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// One generation conditioned on all elements.
    Joined,
    /// One generation per element.
    PerElement,
}

/// Negative-mining candidate selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MiningBand {
    /// Skip the most distant 5% of candidates, then take M.
    PercentileBand,
    /// Plain most-distant-first tail.
    Tail,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ConfigError {
    #[error("{which} temperature must be positive, got {value}")]
    NonPositiveTau { which: &'static str, value: f64 },
    #[error("strength must lie in (0, 1], got {0}")]
    InvalidStrength(f64),
    #[error("timesteps must be at least 1")]
    ZeroTimesteps,
    #[error("refine_iters must be at least 1")]
    ZeroRefineIters,
    #[error("noise_step must be positive, got {0}")]
    NonPositiveNoiseStep(f64),
    #[error("dimension `{0}` must be positive")]
    ZeroDim(&'static str),
    #[error("image arrays are 3-channel, got {0} channels")]
    BadChannelCount(usize),
    #[error("identity backend requires latent shape == image shape")]
    LatentImageMismatch,
    #[error("projection batch size must be at least 1")]
    ZeroBatch,
    #[error("failed to parse config: {0}")]
    Parse(String),
}

/// All knobs for one run. Serialized as the run-configuration JSON file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Temperature for the detection score.
    pub score_tau: f64,
    /// Temperature for the energy loss.
    pub energy_tau: f64,
    /// `m_out`: additive constant in the energy loss.
    pub energy_margin: f64,
    /// Fraction of the diffusion horizon actually traversed, in (0, 1].
    pub strength: f64,
    /// Diffusion horizon T.
    pub timesteps: usize,
    /// Refinement iterations K.
    pub refine_iters: usize,
    /// Effective noise update step (r*rho in skip mode, r in full mode).
    pub noise_step: f64,
    /// Image shape [channels, height, width].
    pub image_shape: [usize; 3],
    /// Latent shape [channels, height, width].
    pub latent_shape: [usize; 3],
    /// Embedding dimension d shared by image and text features.
    pub embed_dim: usize,
    pub backend: BackendKind,
    pub sim_mode: SimMode,
    pub neg_denominator: NegDenominator,
    pub prompt_mode: PromptMode,
    pub mining_band: MiningBand,
    pub proj_epochs: usize,
    pub proj_lr: f64,
    pub proj_batch: usize,
    pub proj_weight_decay: f64,
    pub label_epochs: usize,
    pub label_lr: f64,
    /// Denoising-objective steps used to prepare the toy noise predictor.
    pub predictor_train_steps: usize,
    /// Command line for the external diffusion backend, if selected.
    pub external_cmd: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            score_tau: 0.07,
            energy_tau: 1.0,
            energy_margin: -7.0,
            strength: 0.6,
            timesteps: 20,
            refine_iters: 3,
            noise_step: 10.0,
            image_shape: [3, 32, 32],
            latent_shape: [3, 16, 16],
            embed_dim: 64,
            backend: BackendKind::ToyVaeToyUnet,
            sim_mode: SimMode::Exponential,
            neg_denominator: NegDenominator::Images,
            prompt_mode: PromptMode::Joined,
            mining_band: MiningBand::PercentileBand,
            proj_epochs: 3,
            proj_lr: 1e-3,
            proj_batch: 128,
            proj_weight_decay: 1e-5,
            label_epochs: 5,
            label_lr: 2e-3,
            predictor_train_steps: 300,
            external_cmd: None,
        }
    }
}

impl RunConfig {
    /// Validate every field; the first violated field reports its own error.
    pub fn validate(&self) -> Result<()> {
        if self.score_tau <= 0.0 {
            return Err(ConfigError::NonPositiveTau {
                which: "score",
                value: self.score_tau,
            }
            .into());
        }
        if self.energy_tau <= 0.0 {
            return Err(ConfigError::NonPositiveTau {
                which: "energy",
                value: self.energy_tau,
            }
            .into());
        }
        if !(self.strength > 0.0 && self.strength <= 1.0) {
            return Err(ConfigError::InvalidStrength(self.strength).into());
        }
        if self.timesteps == 0 {
            return Err(ConfigError::ZeroTimesteps.into());
        }
        if self.refine_iters == 0 {
            return Err(ConfigError::ZeroRefineIters.into());
        }
        if self.noise_step <= 0.0 {
            return Err(ConfigError::NonPositiveNoiseStep(self.noise_step).into());
        }
        if self.image_shape.iter().any(|&d| d == 0) {
            return Err(ConfigError::ZeroDim("image_shape").into());
        }
        if self.latent_shape.iter().any(|&d| d == 0) {
            return Err(ConfigError::ZeroDim("latent_shape").into());
        }
        if self.embed_dim == 0 {
            return Err(ConfigError::ZeroDim("embed_dim").into());
        }
        if self.image_shape[0] != 3 {
            return Err(ConfigError::BadChannelCount(self.image_shape[0]).into());
        }
        if self.backend == BackendKind::IdentityVaeToyUnet && self.latent_shape != self.image_shape
        {
            return Err(ConfigError::LatentImageMismatch.into());
        }
        if self.proj_batch == 0 {
            return Err(ConfigError::ZeroBatch.into());
        }
        Ok(())
    }

    /// Starting timestep for the partial-noising schedule.
    pub fn start_timestep(&self) -> usize {
        ((self.strength * self.timesteps as f64).round() as usize)
            .clamp(1, self.timesteps)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(ConfigError::Parse(e.to_string())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_path(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
