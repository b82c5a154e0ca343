//! Synthetic clips with planted, separable verb and noun signals.
//!
//! The verb is a cosine along the frame axis (constant over space); the noun
//! is a cosine along image rows (constant over time and columns, so it
//! survives horizontal flips). Both are added to Gaussian noise in every
//! requested modality. Labels cycle through the classes; nouns are shuffled
//! independently so neither label predicts the other.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use mmvt_tensor::Tensor;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::model_spec::{Modality, SPEC_BINS, SPEC_FRAMES};
use crate::rng;
use crate::model::{MMModel, ModelConfig};
use crate::model_spec::{parse_model_spec, EncoderDims};
use crate::trainer::{self, AugmentSwitches, ClipData, TrainConfig, TrainLog};
use crate::visual::{save_frames, ManifestEntry};

pub const SIGNAL_AMPLITUDE: f64 = 0.5;
pub const NOISE_STD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_clips: usize,
    pub n_verbs: usize,
    pub n_nouns: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub modalities: Vec<Modality>,
    pub seed: u64,
}

/// Non-constant cosine basis vector `1 + class mod (len−1)` of length
/// `len`, scaled up each time the classes wrap around the basis. The
/// constant vector is skipped so no class reads as a plain offset.
pub fn class_pattern(class: usize, len: usize) -> Vec<f64> {
    let basis = len.saturating_sub(1).max(1);
    let k = 1 + class % basis;
    let gain = 1.0 + (class / basis) as f64;
    (0..len)
        .map(|i| gain * (PI * k as f64 * (i as f64 + 0.5) / len as f64).cos())
        .collect()
}

fn planted(dims: [usize; 4], verb: &[f64], noun: &[f64], noise: &mut impl FnMut() -> f64, base: f64) -> Tensor<f32> {
    let [f, h, w, c] = dims;
    let mut data = Vec::with_capacity(f * h * w * c);
    for &v in &verb[..f] {
        for &n in &noun[..h] {
            let s = base + SIGNAL_AMPLITUDE * (v + n) / 2.0;
            for _ in 0..w * c {
                data.push((s + noise()) as f32);
            }
        }
    }
    Tensor::new(dims.to_vec(), data).expect("synthetic dims")
}

pub fn make_synthetic(cfg: &SyntheticConfig) -> Result<Vec<ClipData>> {
    if cfg.n_verbs < 2 || cfg.n_nouns < 2 {
        return Err(invalid("synthetic data needs at least two verbs and two nouns"));
    }
    if cfg.frames < 2 || cfg.height < 2 || cfg.width == 0 {
        return Err(invalid("synthetic clips need at least two frames and two rows"));
    }
    let mut label_rng = rng::stream(cfg.seed, "synthetic-labels", &[]);
    let mut nouns: Vec<usize> = (0..cfg.n_clips).map(|i| i % cfg.n_nouns).collect();
    nouns.shuffle(&mut label_rng);
    let normal = Normal::new(0.0, NOISE_STD).expect("finite std");
    let has = |m| cfg.modalities.contains(&m);
    Ok((0..cfg.n_clips)
        .map(|i| {
            let (verb, noun) = (i % cfg.n_verbs, nouns[i]);
            let mut r = rng::stream(cfg.seed, "synthetic-noise", &[i as u64]);
            let mut noise = || normal.sample(&mut r);
            let tv = class_pattern(verb, cfg.frames);
            let image = [cfg.frames, cfg.height, cfg.width];
            let rgb = has(Modality::Rgb)
                .then(|| planted([image[0], image[1], image[2], 3], &tv, &class_pattern(noun, cfg.height), &mut noise, 0.5));
            let flow = has(Modality::Flow)
                .then(|| planted([image[0], image[1], image[2], 2], &tv, &class_pattern(noun, cfg.height), &mut noise, 0.0));
            let spec = has(Modality::Spectrogram).then(|| {
                // rows of a spectrogram image are time; plant the noun on mel bins
                let t = planted([cfg.frames, SPEC_BINS, SPEC_FRAMES, 1], &tv, &class_pattern(noun, SPEC_BINS), &mut noise, 0.0);
                transpose_last(&t)
            });
            ClipData {
                clip_id: format!("synth{i:05}"),
                rgb,
                flow,
                spec,
                verb,
                noun,
            }
        })
        .collect())
}

/// Writes the RGB and flow of `clips` as `.mmt` files under `dir` plus a
/// `manifest.json` referencing them; returns the manifest path. Synthetic
/// spectrograms have no waveform and are not written.
pub fn write_manifest(dir: &Path, clips: &[ClipData]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(clips.len());
    for c in clips {
        let rgb = c.rgb.as_ref().ok_or_else(|| invalid(format!("clip {} has no RGB", c.clip_id)))?;
        let video = PathBuf::from(format!("{}.rgb.mmt", c.clip_id));
        save_frames(&dir.join(&video), rgb)?;
        let flow = match &c.flow {
            Some(f) => {
                let p = PathBuf::from(format!("{}.flow.mmt", c.clip_id));
                save_frames(&dir.join(&p), f)?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            clip_id: c.clip_id.clone(),
            video,
            flow,
            audio: None,
            verb: c.verb,
            noun: c.noun,
        });
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&entries)?)?;
    Ok(path)
}

/// The memorization run: a two-view model trained on 32 synthetic clips for
/// 300 steps without augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct OverfitSetup {
    pub model: ModelConfig,
    pub data: SyntheticConfig,
    pub train: TrainConfig,
    pub init_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverfitReport {
    pub log: TrainLog,
    pub steps: usize,
    /// Eval-mode accuracy on the training clips.
    pub verb_acc: f64,
    pub noun_acc: f64,
}

impl OverfitSetup {
    pub fn tiny(seed: u64) -> Self {
        let mut model = ModelConfig::new(parse_model_spec("Ti/2:R+Ti/4:S").expect("valid spec"), 8, 32, 32);
        model.view_dims = Some(EncoderDims {
            layers: 2,
            heads: 2,
            hidden: 32,
            mlp_dim: 64,
        });
        model.global_dims = Some(EncoderDims {
            layers: 1,
            heads: 2,
            hidden: 32,
            mlp_dim: 64,
        });
        model.n_verbs = 4;
        model.n_nouns = 4;
        let data = SyntheticConfig {
            n_clips: 32,
            n_verbs: 4,
            n_nouns: 4,
            frames: model.frames,
            height: model.height,
            width: model.width,
            modalities: model.spec.modalities(),
            seed,
        };
        let train = TrainConfig {
            base_lr: 0.05,
            epochs: 75,
            seed,
            augment: AugmentSwitches {
                spatial: false,
                spec_augment: false,
            },
            ..TrainConfig::default()
        };
        Self {
            model,
            data,
            train,
            init_std: 0.3,
        }
    }

    pub fn run(&self) -> Result<(MMModel<f32>, OverfitReport)> {
        let clips = make_synthetic(&self.data)?;
        let mut model = MMModel::init(self.model.clone(), self.train.seed, self.init_std)?;
        let log = trainer::train(&mut model, &clips, &self.train, |_| {})?;
        let (verb_acc, noun_acc) = trainer::accuracy(&model, &clips)?;
        let steps = log.steps.len();
        Ok((
            model,
            OverfitReport {
                log,
                steps,
                verb_acc,
                noun_acc,
            },
        ))
    }
}

/// `[F, A, B, 1]` → `[F, B, A]`.
fn transpose_last(t: &Tensor<f32>) -> Tensor<f32> {
    let d = t.dims();
    let (f, a, b) = (d[0], d[1], d[2]);
    let src = t.data();
    Tensor::from_fn(vec![f, b, a], |i| {
        let (fi, rest) = (i / (a * b), i % (a * b));
        let (bi, ai) = (rest / a, rest % a);
        src[(fi * a + ai) * b + bi]
    })
}
