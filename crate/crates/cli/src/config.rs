//! Run configuration: a flat TOML file, overridable from the command line.

use std::fmt;
use std::path::{Path, PathBuf};

use colourgan::discriminator::{self, DiscriminatorConfig};
use colourgan::generator::{self, GeneratorConfig};
use colourgan::losses::{LossConfig, PerceptualNorm};
use colourgan::nn::{NormKind, NormPolicy};
use colourgan::training::{AdamConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable consulted when no dataset root is configured.
pub const DATA_ENV: &str = "COLOURGAN_DATA";

/// Normalization layout of both networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormSchedule {
    /// Mixed instance/batch layers in the shallow levels, batch norm deeper.
    Ibn,
    Bn,
    In,
}

impl fmt::Display for NormSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormSchedule::Ibn => "ibn",
            NormSchedule::Bn => "bn",
            NormSchedule::In => "in",
        })
    }
}

impl std::str::FromStr for NormSchedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ibn" => Ok(NormSchedule::Ibn),
            "bn" => Ok(NormSchedule::Bn),
            "in" => Ok(NormSchedule::In),
            _ => Err(format!("unknown norm schedule `{s}` (expected ibn, bn or in)")),
        }
    }
}

/// Which networks use spectrally normalized weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectralTarget {
    None,
    Discriminator,
    Generator,
    Both,
}

impl SpectralTarget {
    fn generator(self) -> bool {
        matches!(self, SpectralTarget::Generator | SpectralTarget::Both)
    }

    fn discriminator(self) -> bool {
        matches!(self, SpectralTarget::Discriminator | SpectralTarget::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Row label in comparison tables.
    pub label: String,
    pub data_root: Option<PathBuf>,
    pub seed: u64,
    pub image_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lambda: f64,
    pub scales: usize,
    pub norm_schedule: NormSchedule,
    pub spectral_norm: SpectralTarget,
    pub ibn_fraction: f64,
    pub dropout_rate: f64,
    pub eval_dropout: bool,
    pub checkpoint_interval: usize,
    pub test_per_class: usize,
    pub augment: bool,
    pub workers: usize,
    pub perceptual_weight: f64,
    pub perceptual_squared: bool,
    /// Pretrained extractor weights for the perceptual metric and loss;
    /// a fixed random stack is used when absent.
    pub vgg_weights: Option<PathBuf>,
    /// Explicit per-layer normalization, overriding `norm_schedule`.
    pub encoder_norms: Option<Vec<NormKind>>,
    pub decoder_norms: Option<Vec<NormKind>>,
    pub discriminator_norms: Option<Vec<NormKind>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            label: "IBN+SN+MD".into(),
            data_root: None,
            seed: 0,
            image_size: 64,
            epochs: 20,
            batch_size: 4,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            lambda: colourgan::losses::DEFAULT_LAMBDA,
            scales: discriminator::DEFAULT_SCALES,
            norm_schedule: NormSchedule::Ibn,
            spectral_norm: SpectralTarget::Both,
            ibn_fraction: colourgan::nn::norm::DEFAULT_IBN_FRACTION,
            dropout_rate: generator::DROPOUT_RATE,
            eval_dropout: false,
            checkpoint_interval: 5,
            test_per_class: 10,
            augment: false,
            workers: 1,
            perceptual_weight: 0.0,
            perceptual_squared: false,
            vgg_weights: None,
            encoder_norms: None,
            decoder_norms: None,
            discriminator_norms: None,
        }
    }
}

/// Command-line values that replace file keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub image_size: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lambda: Option<f64>,
    pub scales: Option<usize>,
    pub norm_schedule: Option<NormSchedule>,
    pub data_root: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Canonical text of the fully resolved configuration. Parsing it
    /// back yields an identical value.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &o.$field {
                    self.$field = v.clone().into();
                }
            )*};
        }
        set!(seed, image_size, epochs, batch_size, lambda, scales, norm_schedule, data_root);
    }

    /// Dataset root from the config, else from `COLOURGAN_DATA`.
    pub fn resolve_data_root(&mut self) -> Result<PathBuf, CliError> {
        if self.data_root.is_none() {
            self.data_root = std::env::var_os(DATA_ENV).map(PathBuf::from);
        }
        self.data_root
            .clone()
            .ok_or_else(|| CliError::Config(format!("data_root is not set and {DATA_ENV} is empty")))
    }

    fn policy(&self, kind: NormKind) -> NormPolicy {
        let p = NormPolicy::new(kind);
        if kind == NormKind::Ibn {
            p.with_fraction(self.ibn_fraction)
        } else {
            p
        }
    }

    pub fn to_train_config(&self) -> Result<TrainConfig, CliError> {
        let mut g = GeneratorConfig::for_image_size(self.image_size);
        let depth = g.depth();
        let (enc, dec) = match self.norm_schedule {
            NormSchedule::Ibn => generator::ibn_schedule(depth),
            NormSchedule::Bn => generator::uniform_schedule(depth, NormPolicy::BN),
            NormSchedule::In => generator::uniform_schedule(depth, NormPolicy::IN),
        };
        let map = |v: Vec<NormPolicy>| v.into_iter().map(|p| self.policy(p.kind)).collect::<Vec<_>>();
        g.encoder_norms = map(enc);
        g.decoder_norms = map(dec);
        if let Some(kinds) = &self.encoder_norms {
            g.encoder_norms = kinds.iter().map(|&k| self.policy(k)).collect();
        }
        if let Some(kinds) = &self.decoder_norms {
            g.decoder_norms = kinds.iter().map(|&k| self.policy(k)).collect();
        }
        g.dropout_rate = self.dropout_rate;
        g.eval_dropout = self.eval_dropout;
        g.spectral_norm = self.spectral_norm.generator();

        let mut d = DiscriminatorConfig::default();
        let blocks = d.channels.len();
        d.norms = match self.norm_schedule {
            NormSchedule::Ibn => discriminator::ibn_schedule(),
            NormSchedule::Bn => discriminator::uniform_schedule(blocks, NormPolicy::BN),
            NormSchedule::In => discriminator::uniform_schedule(blocks, NormPolicy::IN),
        }
        .into_iter()
        .map(|p| self.policy(p.kind))
        .collect();
        if let Some(kinds) = &self.discriminator_norms {
            d.norms = kinds.iter().map(|&k| self.policy(k)).collect();
        }
        d.n_scales = self.scales;
        d.spectral_norm = self.spectral_norm.discriminator();

        let cfg = TrainConfig {
            generator: g,
            discriminator: d,
            loss: LossConfig {
                lambda_l1: self.lambda,
                n_scales: self.scales,
            },
            optimizer: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                ..AdamConfig::default()
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            checkpoint_interval: self.checkpoint_interval,
            image_size: self.image_size,
            augment: self.augment,
            workers: self.workers,
            perceptual_weight: self.perceptual_weight,
            perceptual_norm: if self.perceptual_squared {
                PerceptualNorm::SquaredL1
            } else {
                PerceptualNorm::L1
            },
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}
