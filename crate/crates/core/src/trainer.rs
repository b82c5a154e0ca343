//! Two-head supervised training: cosine schedule with linear warmup, SGD
//! with momentum, label-smoothed cross-entropy on verbs and nouns.
//!
//! Each sample of a batch gets its own tape and its own random streams
//! keyed by `(seed, epoch, sample index)`; per-sample gradients are summed
//! in sample order, so results do not depend on the thread count.

use std::f64::consts::PI;

use mmvt_tensor::{Element, Tape, Tensor, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{self, SpecMask, MAX_FREQ_MASK, MAX_TIME_MASK};
use crate::error::{invalid, CoreError, Result};
use crate::model::{MMModel, ModelInputs, ParamStore};
use crate::model_spec::Modality;
use crate::rng;
use crate::visual::{self, AugmentConfig, ClipManifest, ManifestEntry, SampleMode, SpatialParams};

pub const MOMENTUM: f64 = 0.9;
pub const DEFAULT_SMOOTHING: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if warmup_steps >= total_steps {
            return Err(invalid(format!(
                "warmup {warmup_steps} must be shorter than {total_steps} total steps"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_steps,
            total_steps,
        })
    }

    /// Warmup of `round(frac·total)` steps, capped below `total`.
    pub fn with_warmup_frac(base_lr: f64, warmup_frac: f64, total_steps: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&warmup_frac) {
            return Err(invalid(format!("warmup fraction {warmup_frac} outside [0, 1)")));
        }
        let warmup = ((warmup_frac * total_steps as f64).round() as usize).min(total_steps.saturating_sub(1));
        Self::new(base_lr, warmup, total_steps)
    }

    /// Linear ramp `0 → base_lr` over warmup, then half-cosine decay to 0.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(invalid(format!("step {step} beyond {} total steps", self.total_steps)));
        }
        if step < self.warmup_steps {
            return Ok(self.base_lr * step as f64 / self.warmup_steps as f64);
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        Ok(0.5 * self.base_lr * (1.0 + (PI * progress).cos()))
    }
}

/// Sum of the verb and noun smoothed cross-entropies.
pub fn two_head_loss<E: Element>(
    t: &mut Tape<E>,
    verb_logits: Var,
    noun_logits: Var,
    verb_targets: &[usize],
    noun_targets: &[usize],
    smoothing: f64,
) -> Result<Var> {
    let v = t.cross_entropy_smoothed(verb_logits, verb_targets, smoothing)?;
    let n = t.cross_entropy_smoothed(noun_logits, noun_targets, smoothing)?;
    Ok(t.add(v, n)?)
}

/// Momentum buffers mirroring the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<E> {
    pub momentum: f64,
    pub velocity: Vec<Tensor<E>>,
    pub step: u64,
}

impl<E: Element> OptState<E> {
    pub fn new(params: &ParamStore<E>) -> Self {
        Self {
            momentum: MOMENTUM,
            velocity: params.values().iter().map(|v| Tensor::zeros(v.dims().to_vec())).collect(),
            step: 0,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.velocity.iter().all(Tensor::all_finite)
    }
}

/// `v ← μ·v + g; p ← p − lr·v`.
pub fn sgd_step<E: Element>(params: &mut ParamStore<E>, grads: &[Tensor<E>], opt: &mut OptState<E>, lr: f64) -> Result<()> {
    if grads.len() != params.len() || opt.velocity.len() != params.len() {
        return Err(invalid(format!(
            "{} grads / {} buffers for {} parameters",
            grads.len(),
            opt.velocity.len(),
            params.len()
        )));
    }
    for ((p, g), v) in params.values().iter().zip(grads).zip(&opt.velocity) {
        if p.dims() != g.dims() || p.dims() != v.dims() {
            return Err(invalid(format!(
                "gradient {:?} / buffer {:?} for parameter {:?}",
                g.dims(),
                v.dims(),
                p.dims()
            )));
        }
    }
    let (mu, lr) = (E::from_f64(opt.momentum), E::from_f64(lr));
    for ((p, g), v) in params.values_mut().iter_mut().zip(grads).zip(opt.velocity.iter_mut()) {
        for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *v = mu * *v + g;
            *p = *p - lr * *v;
        }
    }
    opt.step += 1;
    Ok(())
}

/// One clip held in memory. Modalities are `[N, …]` with a shared `N`;
/// spectrograms are already normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipData {
    pub clip_id: String,
    pub rgb: Option<Tensor<f32>>,
    pub flow: Option<Tensor<f32>>,
    pub spec: Option<Tensor<f32>>,
    pub verb: usize,
    pub noun: usize,
}

impl ClipData {
    pub fn frames(&self) -> usize {
        [&self.rgb, &self.flow, &self.spec]
            .into_iter()
            .flatten()
            .map(|t| t.dims()[0])
            .next()
            .unwrap_or(0)
    }

    pub fn has(&self, m: Modality) -> bool {
        match m {
            Modality::Rgb => self.rgb.is_some(),
            Modality::Flow => self.flow.is_some(),
            Modality::Spectrogram => self.spec.is_some(),
        }
    }
}

/// Decodes one manifest entry. The spectrogram is extracted (one image per
/// video frame) and normalized only when `modalities` asks for it.
pub fn load_entry(manifest: &ClipManifest, entry: &ManifestEntry, modalities: &[Modality], n_verbs: usize, n_nouns: usize) -> Result<ClipData> {
    let loaded = visual::load_clip(manifest, entry, n_verbs, n_nouns)?;
    let frames = loaded.video.len();
    let want = |m| modalities.contains(&m);
    let flow = match (want(Modality::Flow), loaded.flow) {
        (true, None) => return Err(CoreError::Missing(format!("flow for clip {}", entry.clip_id))),
        (true, Some(f)) => Some(f.frames),
        (false, _) => None,
    };
    let spec = match (want(Modality::Spectrogram), loaded.audio) {
        (true, None) => return Err(CoreError::Missing(format!("audio for clip {}", entry.clip_id))),
        (true, Some(a)) => Some(audio::normalize_stream(&audio::extract_stream(&a, frames)?).data),
        (false, _) => None,
    };
    Ok(ClipData {
        clip_id: entry.clip_id.clone(),
        rgb: want(Modality::Rgb).then_some(loaded.video.frames),
        flow,
        spec,
        verb: entry.verb,
        noun: entry.noun,
    })
}

/// Every manifest entry, in manifest order.
pub fn load_manifest_clips(manifest: &ClipManifest, modalities: &[Modality], n_verbs: usize, n_nouns: usize) -> Result<Vec<ClipData>> {
    manifest
        .entries
        .par_iter()
        .map(|e| load_entry(manifest, e, modalities, n_verbs, n_nouns))
        .collect()
}

/// Per-sample augmentation switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSwitches {
    pub spatial: bool,
    pub spec_augment: bool,
}

impl Default for AugmentSwitches {
    fn default() -> Self {
        Self {
            spatial: true,
            spec_augment: true,
        }
    }
}

fn window(t: &Option<Tensor<f32>>, start: usize, frames: usize) -> Result<Option<Tensor<f32>>> {
    t.as_ref()
        .map(|x| visual::take_frames(&visual::loop_frames(x, frames), start, frames))
        .transpose()
}

fn spatial(t: Option<Tensor<f32>>, p: &SpatialParams, h: usize, w: usize, flow: bool) -> Result<Option<Tensor<f32>>> {
    t.map(|x| {
        if flow {
            visual::apply_to_flow(&x, p, h, w)
        } else {
            visual::apply_to_video(&x, p, h, w)
        }
    })
    .transpose()
}

/// Model inputs for the window starting at `start`, center-cropped.
pub fn eval_inputs(clip: &ClipData, start: usize, frames: usize, height: usize, width: usize) -> Result<ModelInputs<f32>> {
    let rgb = window(&clip.rgb, start, frames)?;
    let flow = window(&clip.flow, start, frames)?;
    let dims = rgb.as_ref().or(flow.as_ref()).map(|t| (t.dims()[1], t.dims()[2]));
    let p = dims.map(|(h, w)| SpatialParams::center(h, w, height, width));
    Ok(ModelInputs {
        rgb: p.as_ref().map_or(Ok(None), |p| spatial(rgb, p, height, width, false))?,
        flow: p.as_ref().map_or(Ok(None), |p| spatial(flow, p, height, width, true))?,
        spec: window(&clip.spec, start, frames)?,
    })
}

/// Randomly sampled training window with spatial augmentation and
/// SpecAugment.
pub fn train_inputs(
    clip: &ClipData,
    frames: usize,
    height: usize,
    width: usize,
    aug: AugmentSwitches,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<ModelInputs<f32>> {
    let start = visual::temporal_sample(clip.frames(), frames, SampleMode::Train, Some(&mut *rng));
    let rgb = window(&clip.rgb, start, frames)?;
    let flow = window(&clip.flow, start, frames)?;
    let dims = rgb.as_ref().or(flow.as_ref()).map(|t| (t.dims()[1], t.dims()[2]));
    let p = dims.map(|(h, w)| {
        if aug.spatial {
            SpatialParams::sample(h, w, &AugmentConfig::new(height, width), rng)
        } else {
            SpatialParams::center(h, w, height, width)
        }
    });
    let mut spec = window(&clip.spec, start, frames)?;
    if aug.spec_augment {
        if let Some(s) = spec.take() {
            let stream = crate::audio::SpectrogramStream {
                data: s,
                normalized: true,
            };
            spec = Some(SpecMask::sample(rng, MAX_TIME_MASK, MAX_FREQ_MASK).apply(&stream).data);
        }
    }
    Ok(ModelInputs {
        rgb: p.as_ref().map_or(Ok(None), |p| spatial(rgb, p, height, width, false))?,
        flow: p.as_ref().map_or(Ok(None), |p| spatial(flow, p, height, width, true))?,
        spec,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_frac: f64,
    pub smoothing: f64,
    pub seed: u64,
    pub augment: AugmentSwitches,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.4,
            batch_size: 8,
            epochs: 10,
            warmup_frac: 0.05,
            smoothing: DEFAULT_SMOOTHING,
            seed: 0,
            augment: AugmentSwitches::default(),
        }
    }
}

/// One record per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub verb_acc: f64,
    pub noun_acc: f64,
}

/// Training-mode accuracy accumulated over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub verb_acc: f64,
    pub noun_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepMetrics>,
    pub epochs: Vec<EpochMetrics>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<E: PartialOrd + Copy>(xs: &[E]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

struct SampleResult {
    loss: f64,
    grads: Vec<Tensor<f32>>,
    verb_ok: bool,
    noun_ok: bool,
}

fn sample_step(
    model: &MMModel<f32>,
    clip: &ClipData,
    cfg: &TrainConfig,
    epoch: usize,
    index: usize,
) -> Result<SampleResult> {
    let mc = &model.config;
    let key = [epoch as u64, index as u64];
    let mut aug_rng = rng::stream(cfg.seed, "augment", &key);
    let inputs = train_inputs(clip, mc.frames, mc.height, mc.width, cfg.augment, &mut aug_rng)?;
    let mut drop_rng = rng::stream(cfg.seed, "droplayer", &key);
    let mut t = Tape::new();
    let p = model.params.bind(&mut t);
    let logits = model.forward(&mut t, &p, &inputs, Some(&mut drop_rng))?;
    let loss = two_head_loss(&mut t, logits.verb, logits.noun, &[clip.verb], &[clip.noun], cfg.smoothing)?;
    let grads = t.backward(loss)?;
    Ok(SampleResult {
        loss: f64::from(t.value(loss).item()?),
        grads: p.iter().map(|&v| grads.get_or_zeros(&t, v)).collect(),
        verb_ok: argmax(t.value(logits.verb).data()) == clip.verb,
        noun_ok: argmax(t.value(logits.noun).data()) == clip.noun,
    })
}

/// Runs `cfg.epochs` epochs; `on_step` sees every step record as it is made.
pub fn train(
    model: &mut MMModel<f32>,
    data: &[ClipData],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(invalid("batch size and epochs must be positive"));
    }
    for clip in data {
        for v in &model.config.spec.views {
            if !clip.has(v.modality) {
                return Err(CoreError::Missing(format!("{} for clip {}", v.modality.name(), clip.clip_id)));
            }
        }
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let schedule = Schedule::with_warmup_frac(cfg.base_lr, cfg.warmup_frac, cfg.epochs * steps_per_epoch)?;
    let mut opt = OptState::new(&model.params);
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let order = shuffled(data.len(), cfg.seed, epoch);
        let (mut e_loss, mut e_verb, mut e_noun) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            // at most one in-flight gradient set per worker, summed in sample order
            let mut grads: Vec<Tensor<f32>> = model.params.values().iter().map(|v| Tensor::zeros(v.dims().to_vec())).collect();
            let mut results = Vec::with_capacity(batch.len());
            for wave in batch.chunks(rayon::current_num_threads().max(1)) {
                let done = wave
                    .par_iter()
                    .map(|&i| sample_step(model, &data[i], cfg, epoch, i))
                    .collect::<Result<Vec<_>>>()?;
                for mut r in done {
                    for (acc, g) in grads.iter_mut().zip(&r.grads) {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    r.grads = Vec::new();
                    results.push(r);
                }
            }
            let scale = 1.0 / batch.len() as f32;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            let lr = schedule.lr_at(step)?;
            sgd_step(&mut model.params, &grads, &mut opt, lr)?;
            if !opt.all_finite() {
                return Err(CoreError::Tensor(mmvt_tensor::TensorError::NonFinite { op: "sgd_step" }));
            }
            let loss = results.iter().map(|r| r.loss).sum::<f64>() / batch.len() as f64;
            let verb = results.iter().filter(|r| r.verb_ok).count();
            let noun = results.iter().filter(|r| r.noun_ok).count();
            e_loss += loss * batch.len() as f64;
            e_verb += verb;
            e_noun += noun;
            let m = StepMetrics {
                step,
                epoch,
                lr,
                loss,
                verb_acc: verb as f64 / batch.len() as f64,
                noun_acc: noun as f64 / batch.len() as f64,
            };
            on_step(&m);
            log.steps.push(m);
            step += 1;
        }
        let n = data.len() as f64;
        log.epochs.push(EpochMetrics {
            epoch,
            loss: e_loss / n,
            verb_acc: e_verb as f64 / n,
            noun_acc: e_noun as f64 / n,
        });
    }
    Ok(log)
}

/// Sample order for one epoch (Fisher–Yates on a dedicated stream).
pub fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "shuffle", &[epoch as u64]));
    order
}

/// Eval-mode (single center window) accuracy over `data`: `(verb, noun)`.
pub fn accuracy(model: &MMModel<f32>, data: &[ClipData]) -> Result<(f64, f64)> {
    let mc = &model.config;
    let hits = data
        .par_iter()
        .map(|clip| {
            let x = eval_inputs(clip, 0, mc.frames, mc.height, mc.width)?;
            let (v, n) = model.predict(&x)?;
            Ok((argmax(&v) == clip.verb, argmax(&n) == clip.noun))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = data.len() as f64;
    Ok((
        hits.iter().filter(|h| h.0).count() as f64 / n,
        hits.iter().filter(|h| h.1).count() as f64 / n,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::new(0.4, 10, 100).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(10).unwrap(), 0.4);
        assert!(s.lr_at(100).unwrap().abs() < 1e-12);
        assert!(s.lr_at(101).is_err());
        assert!(Schedule::new(0.4, 100, 100).is_err());
    }

    #[test]
    fn zero_grad_decays_velocity() {
        let mut ps = ParamStore::<f64>::default();
        ps.add("w".into(), crate::model::ParamKind::Weight, Tensor::full(vec![2], 1.0));
        let mut opt = OptState::new(&ps);
        opt.velocity[0] = Tensor::full(vec![2], 2.0);
        sgd_step(&mut ps, &[Tensor::zeros(vec![2])], &mut opt, 0.1).unwrap();
        assert_eq!(opt.velocity[0].data(), &[1.8, 1.8]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_is_plain_sgd() {
        let mut ps = ParamStore::<f64>::default();
        ps.add("w".into(), crate::model::ParamKind::Weight, Tensor::full(vec![3], 1.0));
        let mut opt = OptState::new(&ps);
        sgd_step(&mut ps, &[Tensor::full(vec![3], 0.5)], &mut opt, 0.2).unwrap();
        assert!(ps.values()[0].data().iter().all(|&v| (v - 0.9).abs() < 1e-15));
        assert!(sgd_step(&mut ps, &[Tensor::zeros(vec![2])], &mut opt, 0.2).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn two_head_uniform_is_two_ln4() {
        let mut t = Tape::<f64>::new();
        let v = t.constant(Tensor::zeros(vec![1, 4]));
        let n = t.constant(Tensor::zeros(vec![1, 4]));
        let l = two_head_loss(&mut t, v, n, &[1], &[3], 0.0).unwrap();
        assert!((t.value(l).data()[0] - 2.0 * 4f64.ln()).abs() < 1e-12);
    }
}
