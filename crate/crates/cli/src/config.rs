//! Training configuration: JSON file values, flag overrides, defaults.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use mmvt_core::model::{DEFAULT_DROPLAYER, DEFAULT_NOUNS, DEFAULT_VERBS, INIT_STD};
use mmvt_core::trainer::{AugmentSwitches, TrainConfig, DEFAULT_SMOOTHING};
use mmvt_core::{parse_model_spec, EncoderDims, ModelConfig, ModelSpec};
use serde::{Deserialize, Serialize};

pub fn parse_spec(s: &str) -> Result<ModelSpec, String> {
    parse_model_spec(s).map_err(|e| e.to_string())
}

/// Encoder size: `backbone` (the size the model string names) or
/// `layers:heads:hidden:mlp`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum DimsOverride {
    #[default]
    Backbone,
    Custom(EncoderDims),
}

impl std::str::FromStr for DimsOverride {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "backbone" {
            return Ok(Self::Backbone);
        }
        let parts = s
            .split(':')
            .map(str::parse::<usize>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| format!("{s:?}: {e}"))?;
        let [layers, heads, hidden, mlp_dim] = parts[..] else {
            return Err(format!("{s:?}: expected backbone or layers:heads:hidden:mlp"));
        };
        let d = EncoderDims {
            layers,
            heads,
            hidden,
            mlp_dim,
        };
        d.validate().map_err(|e| format!("{s:?}: {e}"))?;
        Ok(Self::Custom(d))
    }
}

impl std::fmt::Display for DimsOverride {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Backbone => f.write_str("backbone"),
            Self::Custom(d) => write!(f, "{}:{}:{}:{}", d.layers, d.heads, d.hidden, d.mlp_dim),
        }
    }
}

impl Serialize for DimsOverride {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DimsOverride {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl DimsOverride {
    fn get(self) -> Option<EncoderDims> {
        match self {
            Self::Backbone => None,
            Self::Custom(d) => Some(d),
        }
    }
}

macro_rules! train_keys {
    ($($(#[$doc:meta])* $key:ident: $ty:ty = $default:expr;)*) => {
        /// Config-file keys; every key is optional.
        #[derive(Debug, Default, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct TrainFile {
            $(pub $key: Option<$ty>,)*
        }

        /// Flag overrides, one per config key.
        #[derive(Debug, Default, Args)]
        pub struct TrainOverrides {
            $($(#[$doc])* #[arg(long)] pub $key: Option<$ty>,)*
        }

        /// Fully resolved hyperparameters.
        #[derive(Debug, Clone, PartialEq, Serialize)]
        pub struct TrainSettings {
            $(pub $key: $ty,)*
        }

        impl TrainSettings {
            pub fn resolve(file: &TrainFile, flags: &TrainOverrides) -> Self {
                Self {
                    $($key: flags.$key.clone().or_else(|| file.$key.clone()).unwrap_or($default),)*
                }
            }
        }
    };
}

train_keys! {
    /// Peak learning rate.
    base_lr: f64 = 0.4;
    /// Clips per optimizer step.
    batch_size: usize = 8;
    /// Passes over the manifest.
    epochs: usize = 10;
    /// Fraction of all steps spent in linear warmup.
    warmup_frac: f64 = 0.05;
    /// Drop rate of the deepest block (linear in depth).
    droplayer: f64 = DEFAULT_DROPLAYER;
    /// Label-smoothing mass.
    smoothing: f64 = DEFAULT_SMOOTHING;
    /// Seed of init, shuffling, augmentation and droplayer.
    seed: u64 = 0;
    /// Square crop size in pixels.
    resolution: usize = 224;
    /// Frames per training window.
    frames: usize = 32;
    /// Verb classes.
    n_verbs: usize = DEFAULT_VERBS;
    /// Noun classes.
    n_nouns: usize = DEFAULT_NOUNS;
    /// Standard deviation of the truncated-normal init.
    init_std: f64 = INIT_STD;
    /// Every view encoder's size (backbone or layers:heads:hidden:mlp).
    view_dims: DimsOverride = DimsOverride::Backbone;
    /// Global encoder size (backbone or layers:heads:hidden:mlp).
    global_dims: DimsOverride = DimsOverride::Backbone;
    /// Random resized crops and flips.
    spatial_augment: bool = true;
    /// SpecAugment masks.
    spec_augment: bool = true;
}

/// The configuration echoed to `run_config.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub model: String,
    pub manifest: PathBuf,
    #[serde(flatten)]
    pub train: TrainSettings,
}

impl RunConfig {
    pub fn load(model: &ModelSpec, manifest: &Path, file: Option<&Path>, flags: &TrainOverrides) -> anyhow::Result<Self> {
        let file = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => TrainFile::default(),
        };
        Ok(Self {
            model: model.to_string(),
            manifest: manifest.to_path_buf(),
            train: TrainSettings::resolve(&file, flags),
        })
    }
}

impl TrainSettings {
    pub fn model_config(&self, spec: ModelSpec) -> ModelConfig {
        let mut c = ModelConfig::new(spec, self.frames, self.resolution, self.resolution);
        c.n_verbs = self.n_verbs;
        c.n_nouns = self.n_nouns;
        c.droplayer = self.droplayer;
        c.view_dims = self.view_dims.get();
        c.global_dims = self.global_dims.get();
        c
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.base_lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            warmup_frac: self.warmup_frac,
            smoothing: self.smoothing,
            seed: self.seed,
            augment: AugmentSwitches {
                spatial: self.spatial_augment,
                spec_augment: self.spec_augment,
            },
        }
    }
}
