//! Experiment configuration: schema, defaults, and validation.
//!
//! Configs are loaded from a versioned human-readable file (JSON) into
//! [`RawConfig`], then resolved into a fully-validated [`ExperimentConfig`].
//! Loss-weight defaults are mode-aware: the four training modes are weight
//! masks over one objective, so terms a mode forbids default to zero and any
//! explicit nonzero value there is rejected with the offending field named.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Training mode: which loss terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Pixel reconstruction + KL.
    Vae,
    /// Discriminator-feature reconstruction + KL + GAN.
    VaeGan,
    /// Instance-level InfoNCE + KL (no GAN).
    VaeContrastive,
    /// Instance-level InfoNCE + KL + GAN.
    DcVae,
}

impl Mode {
    pub fn gan_active(self) -> bool {
        matches!(self, Mode::VaeGan | Mode::DcVae)
    }

    pub fn instance_active(self) -> bool {
        matches!(self, Mode::VaeContrastive | Mode::DcVae)
    }

    /// Whether the mode carries a reconstruction term, and in which space.
    pub fn pixel_recon_active(self) -> bool {
        matches!(self, Mode::Vae)
    }

    pub fn feature_recon_active(self) -> bool {
        matches!(self, Mode::VaeGan)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Vae => "vae",
            Mode::VaeGan => "vae_gan",
            Mode::VaeContrastive => "vae_contrastive",
            Mode::DcVae => "dc_vae",
        }
    }
}

/// Per-term weights of the combined objective. `pixel` weights whichever
/// reconstruction term the mode uses (pixel-space in `vae`, discriminator
/// feature-space in `vae_gan`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub kl: f32,
    pub instance: f32,
    pub gan: f32,
    pub pixel: f32,
}

/// Dataset selection. Loaders live in the companion crate; the variants here
/// carry everything needed to locate and shape the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Procedural geometric-shape images used by tests and smoke runs.
    Toy {
        n: usize,
        #[serde(default = "default_toy_eval")]
        n_eval: usize,
        #[serde(default = "default_toy_resolution")]
        resolution: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Standard IDX-format MNIST directory.
    Mnist {
        dir: String,
        #[serde(default = "default_downsample")]
        downsample: usize,
    },
    /// CIFAR-10 binary-format directory.
    Cifar10 {
        dir: String,
        #[serde(default = "default_downsample")]
        downsample: usize,
    },
}

fn default_toy_eval() -> usize {
    256
}
fn default_toy_resolution() -> usize {
    8
}
fn default_downsample() -> usize {
    1
}

impl DatasetSpec {
    pub fn resolution(&self) -> usize {
        match self {
            DatasetSpec::Toy { resolution, .. } => *resolution,
            DatasetSpec::Mnist { downsample, .. } => 28 / downsample,
            DatasetSpec::Cifar10 { downsample, .. } => 32 / downsample,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            DatasetSpec::Cifar10 { .. } => 3,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetSpec::Toy { .. } => "toy",
            DatasetSpec::Mnist { .. } => "mnist",
            DatasetSpec::Cifar10 { .. } => "cifar10",
        }
    }
}

/// Metric evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub fid_sample_count: usize,
    /// Evaluate FID on fewer samples than `fid_sample_count` when the set is
    /// smaller, instead of erroring. The actual count is always recorded.
    pub allow_smaller_fid: bool,
    pub ppl_epsilon: f64,
    pub ppl_sample_count: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            fid_sample_count: 10_000,
            allow_smaller_fid: false,
            ppl_epsilon: 1e-4,
            ppl_sample_count: 1024,
        }
    }
}

/// Backbone sizing knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSettings {
    pub base_width: usize,
    pub fc_dim: usize,
    /// Channel count of the 1x1 reduction in deep-supervision heads.
    pub head_channels: usize,
}

impl Default for ArchSettings {
    fn default() -> Self {
        ArchSettings {
            base_width: 32,
            fc_dim: 128,
            head_channels: 16,
        }
    }
}

/// A fully-resolved, validated experiment description. Serializing this type
/// is the canonical config form; the round trip through serialization is the
/// identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub mode: Mode,
    pub dataset: DatasetSpec,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub queue_capacity: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub loss_weights: LossWeights,
    pub temperature: f32,
    pub contrast_taps: Vec<String>,
    /// Tap feeding the local-patch scheme; `None` disables it.
    pub patch_tap: Option<String>,
    pub patch_loss_start_iter: usize,
    pub total_iters: usize,
    pub seed: u64,
    pub augment_flip: bool,
    pub log_every: usize,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub grid_n: usize,
    pub arch: ArchSettings,
    pub eval: EvalSettings,
}

/// Config validation failure, naming the offending field.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl core::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "invalid config field `{}`: {}", self.field, self.message)
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ConfigError {}

fn err(field: &str, message: impl core::fmt::Display) -> ConfigError {
    ConfigError {
        field: field.to_string(),
        message: message.to_string(),
    }
}

/// The on-disk schema: everything except `mode` is optional and filled with
/// documented defaults during resolution.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub schema_version: Option<u32>,
    pub mode: Option<Mode>,
    pub dataset: Option<DatasetSpec>,
    pub latent_dim: Option<usize>,
    pub embed_dim: Option<usize>,
    pub queue_capacity: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f32>,
    pub adam_beta1: Option<f32>,
    pub adam_beta2: Option<f32>,
    pub loss_weights: Option<RawLossWeights>,
    pub temperature: Option<f32>,
    pub contrast_taps: Option<Vec<String>>,
    pub patch_tap: Option<Option<String>>,
    pub patch_loss_start_iter: Option<usize>,
    pub total_iters: Option<usize>,
    pub seed: Option<u64>,
    pub augment_flip: Option<bool>,
    pub log_every: Option<usize>,
    pub eval_every: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub grid_n: Option<usize>,
    pub arch: Option<ArchSettings>,
    pub eval: Option<EvalSettings>,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawLossWeights {
    pub kl: Option<f32>,
    pub instance: Option<f32>,
    pub gan: Option<f32>,
    pub pixel: Option<f32>,
}

impl RawConfig {
    /// Resolve defaults and validate every invariant. Total: every input is
    /// either accepted or rejected with a named field.
    pub fn resolve(&self) -> Result<ExperimentConfig, ConfigError> {
        let schema_version = self.schema_version.unwrap_or(SCHEMA_VERSION);
        if schema_version != SCHEMA_VERSION {
            return Err(err(
                "schema_version",
                format!("unsupported version {schema_version}, expected {SCHEMA_VERSION}"),
            ));
        }
        let mode = self.mode.ok_or_else(|| err("mode", "required"))?;
        let dataset = self.dataset.clone().unwrap_or(DatasetSpec::Toy {
            n: 512,
            n_eval: 256,
            resolution: 8,
            seed: 0,
        });
        let total_iters = self.total_iters.unwrap_or(10_000);
        let raw_w = self.loss_weights.unwrap_or_default();
        let default_on = |allowed: bool| if allowed { 1.0 } else { 0.0 };
        let loss_weights = LossWeights {
            kl: raw_w.kl.unwrap_or(1.0),
            instance: raw_w.instance.unwrap_or(default_on(mode.instance_active())),
            gan: raw_w.gan.unwrap_or(default_on(mode.gan_active())),
            pixel: raw_w
                .pixel
                .unwrap_or(default_on(mode.pixel_recon_active() || mode.feature_recon_active())),
        };
        let config = ExperimentConfig {
            schema_version,
            mode,
            dataset,
            latent_dim: self.latent_dim.unwrap_or(128),
            embed_dim: self.embed_dim.unwrap_or(16),
            queue_capacity: self.queue_capacity.unwrap_or(8096),
            batch_size: self.batch_size.unwrap_or(128),
            learning_rate: self.learning_rate.unwrap_or(0.0002),
            adam_beta1: self.adam_beta1.unwrap_or(0.0),
            adam_beta2: self.adam_beta2.unwrap_or(0.9),
            loss_weights,
            temperature: self.temperature.unwrap_or(1.0),
            contrast_taps: self
                .contrast_taps
                .clone()
                .unwrap_or_else(|| vec!["low".to_string(), "high".to_string()]),
            patch_tap: self.patch_tap.clone().unwrap_or(Some("low".to_string())),
            // The paper only says patches join "after certain iterations";
            // default to 20% of the budget.
            patch_loss_start_iter: self.patch_loss_start_iter.unwrap_or(total_iters / 5),
            total_iters,
            seed: self.seed.unwrap_or(0),
            augment_flip: self.augment_flip.unwrap_or(false),
            log_every: self.log_every.unwrap_or(50),
            eval_every: self.eval_every.unwrap_or(0),
            checkpoint_every: self.checkpoint_every.unwrap_or(0),
            grid_n: self.grid_n.unwrap_or(16),
            arch: self.arch.clone().unwrap_or_default(),
            eval: self.eval.clone().unwrap_or_default(),
        };
        config.validate()?;
        Ok(config)
    }
}

impl ExperimentConfig {
    /// Check every invariant; errors name the offending field.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(err("schema_version", "unsupported"));
        }
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("embed_dim", self.embed_dim),
            ("queue_capacity", self.queue_capacity),
            ("batch_size", self.batch_size),
            ("total_iters", self.total_iters),
            ("grid_n", self.grid_n),
        ] {
            if v == 0 {
                return Err(err(name, "must be positive"));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(err("learning_rate", "must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(err("temperature", "must be positive"));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(err(name, "must lie in [0, 1)"));
            }
        }
        let w = &self.loss_weights;
        for (name, v) in [
            ("loss_weights.kl", w.kl),
            ("loss_weights.instance", w.instance),
            ("loss_weights.gan", w.gan),
            ("loss_weights.pixel", w.pixel),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(err(name, "must be finite and >= 0"));
            }
        }
        // Mode masks: forbidden terms must be zero.
        let forbid = |cond: bool, name: &str, v: f32| -> Result<(), ConfigError> {
            if cond && v != 0.0 {
                Err(err(name, format!("must be 0 in {} mode", self.mode.as_str())))
            } else {
                Ok(())
            }
        };
        forbid(!self.mode.gan_active(), "loss_weights.gan", w.gan)?;
        forbid(!self.mode.instance_active(), "loss_weights.instance", w.instance)?;
        forbid(
            !(self.mode.pixel_recon_active() || self.mode.feature_recon_active()),
            "loss_weights.pixel",
            w.pixel,
        )?;
        if self.mode.pixel_recon_active() && w.pixel <= 0.0 {
            return Err(err("loss_weights.pixel", "must be > 0 in vae mode"));
        }
        if self.queue_capacity < self.batch_size {
            return Err(err(
                "queue_capacity",
                format!("must be >= batch_size ({})", self.batch_size),
            ));
        }
        if self.mode.instance_active() {
            if self.batch_size < 2 {
                return Err(err("batch_size", "instance loss needs batch_size >= 2"));
            }
            if self.contrast_taps.is_empty() {
                return Err(err("contrast_taps", "must name at least one tap"));
            }
        }
        let mut seen: Vec<&str> = Vec::new();
        for tap in &self.contrast_taps {
            if tap != "low" && tap != "high" {
                return Err(err("contrast_taps", format!("unknown tap `{tap}`")));
            }
            if seen.contains(&tap.as_str()) {
                return Err(err("contrast_taps", format!("duplicate tap `{tap}`")));
            }
            seen.push(tap);
        }
        if let Some(tap) = &self.patch_tap {
            if tap != "low" {
                return Err(err("patch_tap", "patch scheme requires a spatial tap (`low`)"));
            }
        }
        match &self.dataset {
            DatasetSpec::Toy { n, n_eval, resolution, .. } => {
                if *n == 0 || *n_eval == 0 {
                    return Err(err("dataset.n", "must be positive"));
                }
                if *resolution < 8 || *resolution % 2 != 0 {
                    return Err(err("dataset.resolution", "must be an even number >= 8"));
                }
            }
            DatasetSpec::Mnist { downsample, .. } => {
                if !matches!(downsample, 1 | 2 | 4) {
                    return Err(err("dataset.downsample", "must be 1, 2 or 4 for 28x28 input"));
                }
            }
            DatasetSpec::Cifar10 { downsample, .. } => {
                if !matches!(downsample, 1 | 2 | 4 | 8) {
                    return Err(err("dataset.downsample", "must be 1, 2, 4 or 8 for 32x32 input"));
                }
            }
        }
        if self.eval.ppl_epsilon <= 0.0 {
            return Err(err("eval.ppl_epsilon", "must be positive"));
        }
        if self.eval.ppl_sample_count == 0 {
            return Err(err("eval.ppl_sample_count", "must be positive"));
        }
        if self.eval.fid_sample_count < 2 {
            return Err(err("eval.fid_sample_count", "must be at least 2"));
        }
        Ok(())
    }

    /// Deep-supervision taps plus the patch scheme tap, if any, in a stable
    /// order. Queue bookkeeping and reports key off these names.
    pub fn active_tap_names(&self) -> Vec<String> {
        let mut names = self.contrast_taps.clone();
        if self.patch_tap.is_some() {
            names.push("patch".to_string());
        }
        names
    }
}
