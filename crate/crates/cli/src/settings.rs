//! Run settings: one flat JSON object whose keys are mirrored 1:1 by
//! command-line flags. Resolution order is flags > `--config` entries (in the
//! order given) > built-in defaults.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use rine::data::{AugmentConfig, PerturbConfig};
use rine::losses::LossConfig;
use rine::trainer::{Ablation, AdamConfig, TrainConfig};
use rine::HeadConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,
    pub d_prime: usize,
    pub q: usize,
    pub dropout_rate: f64,
    pub xi: f64,
    pub tau: f64,
    pub normalize_features: bool,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub no_tie: bool,
    pub no_contrastive: bool,
    pub last_block_only: bool,
    /// Train-time blur/JPEG/flip augmentation (streams images every step).
    pub augment: bool,
    pub perturb_prob: f64,
    pub blur_sigma_max: f64,
    pub crop_fraction: f64,
    pub jpeg_quality_min: u8,
    pub noise_sigma_max: f64,
}

impl Default for Settings {
    fn default() -> Self {
        let train = TrainConfig::new(HeadConfig::new(1, 1, 1024, 1));
        let perturb = PerturbConfig::default();
        Self {
            seed: train.seed,
            d_prime: train.head.d_prime,
            q: train.head.q,
            dropout_rate: train.head.dropout_rate,
            xi: train.loss.xi,
            tau: train.loss.tau,
            normalize_features: train.loss.normalize_features,
            batch_size: train.batch_size,
            lr: train.lr,
            epochs: train.epochs,
            lr_decay_epochs: train.lr_decay_epochs,
            lr_decay_factor: train.lr_decay_factor,
            beta1: train.adam.beta1,
            beta2: train.adam.beta2,
            eps: train.adam.eps,
            weight_decay: train.adam.weight_decay,
            grad_clip: train.adam.grad_clip,
            no_tie: false,
            no_contrastive: false,
            last_block_only: false,
            augment: false,
            perturb_prob: perturb.prob,
            blur_sigma_max: perturb.blur_sigma.1,
            crop_fraction: perturb.crop_fraction,
            jpeg_quality_min: perturb.jpeg_quality.0,
            noise_sigma_max: perturb.noise_sigma.1,
        }
    }
}

impl Settings {
    /// Head for a backbone with `n` blocks of width `d`.
    pub fn head(&self, n: usize, d: usize) -> HeadConfig {
        HeadConfig {
            dropout_rate: self.dropout_rate,
            ..HeadConfig::new(n, d, self.d_prime, self.q)
        }
    }

    pub fn train_config(&self, n: usize, d: usize) -> TrainConfig {
        TrainConfig {
            loss: LossConfig {
                xi: self.xi,
                tau: self.tau,
                normalize_features: self.normalize_features,
            },
            batch_size: self.batch_size,
            lr: self.lr,
            epochs: self.epochs,
            lr_decay_epochs: self.lr_decay_epochs.clone(),
            lr_decay_factor: self.lr_decay_factor,
            adam: AdamConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
                grad_clip: self.grad_clip,
            },
            seed: self.seed,
            ablation: Ablation {
                no_tie: self.no_tie,
                no_contrastive: self.no_contrastive,
                last_block_only: self.last_block_only,
            },
            augment: self.augment.then(AugmentConfig::default),
            ..TrainConfig::new(self.head(n, d))
        }
    }

    pub fn perturb_config(&self) -> PerturbConfig {
        let defaults = PerturbConfig::default();
        PerturbConfig {
            prob: self.perturb_prob,
            blur_sigma: (defaults.blur_sigma.0, self.blur_sigma_max),
            crop_fraction: self.crop_fraction,
            jpeg_quality: (self.jpeg_quality_min, defaults.jpeg_quality.1),
            noise_sigma: (defaults.noise_sigma.0, self.noise_sigma_max),
        }
    }
}

/// Flags mirroring every settings key. Switches can only turn a key on.
#[derive(Args, Clone, Debug, Default, Serialize)]
pub struct Overrides {
    /// JSON settings file or `key=value` pair; repeatable, later entries win
    #[arg(long = "config", value_name = "FILE|KEY=VALUE")]
    #[serde(skip)]
    pub config: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d_prime: Option<usize>,
    #[arg(long)]
    pub q: Option<usize>,
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    #[arg(long)]
    pub xi: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub normalize_features: Option<bool>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub lr_decay_epochs: Option<Vec<usize>>,
    #[arg(long)]
    pub lr_decay_factor: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Fuse blocks uniformly instead of with learned importance
    #[arg(long)]
    pub no_tie: bool,
    /// Train with cross-entropy only (same as `--config xi=0`)
    #[arg(long)]
    pub no_contrastive: bool,
    /// Use only the final block's CLS token
    #[arg(long)]
    pub last_block_only: bool,
    /// Blur/JPEG/flip augmentation during training
    #[arg(long)]
    pub augment: bool,
    #[arg(long)]
    pub perturb_prob: Option<f64>,
    #[arg(long)]
    pub blur_sigma_max: Option<f64>,
    #[arg(long)]
    pub crop_fraction: Option<f64>,
    #[arg(long)]
    pub jpeg_quality_min: Option<u8>,
    #[arg(long)]
    pub noise_sigma_max: Option<f64>,
}

const SWITCHES: [&str; 4] = ["no_tie", "no_contrastive", "last_block_only", "augment"];

impl Overrides {
    pub fn resolve(&self) -> Result<Settings> {
        let Value::Object(mut merged) = serde_json::to_value(Settings::default())? else {
            unreachable!("settings serialize to an object")
        };
        for entry in &self.config {
            merged.extend(config_entry(entry)?);
        }
        let Value::Object(flags) = serde_json::to_value(self)? else {
            unreachable!("overrides serialize to an object")
        };
        for (key, value) in flags {
            let unset = value.is_null() || (SWITCHES.contains(&key.as_str()) && value == Value::Bool(false));
            if !unset {
                merged.insert(key, value);
            }
        }
        serde_json::from_value(Value::Object(merged)).context("invalid settings")
    }
}

fn config_entry(entry: &str) -> Result<Map<String, Value>> {
    let path = Path::new(entry);
    if path.is_file() {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {entry}"))?;
        return match serde_json::from_str(&text).with_context(|| format!("parsing config {entry}"))? {
            Value::Object(map) => Ok(map),
            _ => bail!("config {entry} must hold a JSON object"),
        };
    }
    let Some((key, raw)) = entry.split_once('=') else {
        bail!("config entry `{entry}` is neither a file nor key=value");
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(Map::from_iter([(key.trim().replace('-', "_"), value)]))
}
