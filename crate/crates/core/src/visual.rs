//! RGB and optical-flow clips: loading, temporal sampling and spatial
//! augmentation.
//!
//! Frames are `[F, H, W, C]` tensors (`C = 3` for RGB in `[0, 1]`, `C = 2` for
//! flow displacements `(u, v)` in pixels).

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use mmvt_tensor::{mmt, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioClip};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor<f32>,
    pub fps: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowClip {
    pub frames: Tensor<f32>,
}

pub const DEFAULT_FPS: f32 = 25.0;

fn check_frames(t: &Tensor<f32>, channels: usize, what: &str) -> Result<()> {
    let d = t.dims();
    if d.len() != 4 {
        return Err(CoreError::Geometry(format!("{what} must be [F,H,W,C], got {d:?}")));
    }
    if d[3] != channels {
        return Err(CoreError::Geometry(format!(
            "{what} must have {channels} channels, got {}",
            d[3]
        )));
    }
    Ok(())
}

impl VideoClip {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        check_frames(&frames, 3, "video")?;
        Ok(Self {
            frames,
            fps: DEFAULT_FPS,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn height(&self) -> usize {
        self.frames.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.dims()[2]
    }
}

impl FlowClip {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        check_frames(&frames, 2, "flow")?;
        Ok(Self { frames })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub video: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<PathBuf>,
    pub verb: usize,
    pub noun: usize,
}

/// Entries plus the directory relative paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipManifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl ClipManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CoreError::MissingFile(path.to_path_buf()),
            _ => e.into(),
        })?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(&e.clip_id) {
                return Err(CoreError::Invalid(format!("duplicate clip_id {}", e.clip_id)));
            }
        }
        Ok(Self {
            entries,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Decoded modalities of one manifest entry; absent modalities stay `None`.
#[derive(Debug, Clone)]
pub struct LoadedClip {
    pub video: VideoClip,
    pub flow: Option<FlowClip>,
    pub audio: Option<AudioClip>,
}

fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    if !path.exists() {
        return Err(CoreError::MissingFile(path.to_path_buf()));
    }
    Ok(mmt::load(path)?.into_exact::<f32>()?)
}

pub fn load_clip(
    manifest: &ClipManifest,
    entry: &ManifestEntry,
    n_verbs: usize,
    n_nouns: usize,
) -> Result<LoadedClip> {
    if entry.verb >= n_verbs || entry.noun >= n_nouns {
        return Err(CoreError::Invalid(format!(
            "clip {}: labels (verb {}, noun {}) outside {n_verbs} verbs / {n_nouns} nouns",
            entry.clip_id, entry.verb, entry.noun
        )));
    }
    let video = VideoClip::new(read_tensor(&manifest.resolve(&entry.video))?)?;
    let flow = match &entry.flow {
        Some(p) => {
            let flow = FlowClip::new(read_tensor(&manifest.resolve(p))?)?;
            if flow.frames.dims()[..3] != video.frames.dims()[..3] {
                return Err(CoreError::Geometry(format!(
                    "clip {}: flow {:?} does not pair with video {:?}",
                    entry.clip_id,
                    flow.frames.dims(),
                    video.frames.dims()
                )));
            }
            Some(flow)
        }
        None => None,
    };
    let audio = match &entry.audio {
        Some(p) => {
            let path = manifest.resolve(p);
            let bytes = std::fs::read(&path).map_err(|_| CoreError::MissingFile(path.clone()))?;
            Some(audio::ingest_audio(&bytes)?)
        }
        None => None,
    };
    Ok(LoadedClip { video, flow, audio })
}

pub fn save_frames(path: &Path, frames: &Tensor<f32>) -> Result<()> {
    mmt::save(path, frames)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Eval,
}

/// Repeats frames cyclically until there are at least `target`.
pub fn loop_frames(frames: &Tensor<f32>, target: usize) -> Tensor<f32> {
    let n = frames.dims()[0];
    if n >= target {
        return frames.clone();
    }
    let per = frames.numel() / n;
    let mut data = Vec::with_capacity(target * per);
    for i in 0..target {
        let j = i % n;
        data.extend_from_slice(&frames.data()[j * per..(j + 1) * per]);
    }
    let mut dims = frames.dims().to_vec();
    dims[0] = target;
    Tensor::new(dims, data).expect("looped dims")
}

/// Frames `[start, start + len)` along the first axis.
pub fn take_frames(frames: &Tensor<f32>, start: usize, len: usize) -> Result<Tensor<f32>> {
    Ok(frames.narrow(0, start, len)?)
}

/// First frame of the training window; eval callers use
/// [`four_crop_starts`] instead, so eval mode returns the first crop.
pub fn temporal_sample<R: Rng + ?Sized>(n: usize, target: usize, mode: SampleMode, rng: Option<&mut R>) -> usize {
    let n = n.max(target);
    match (mode, rng) {
        (SampleMode::Train, Some(rng)) => rng.random_range(0..=n - target),
        _ => 0,
    }
}

/// `round(i·(N−len)/3)` for `i = 0..4`.
pub fn four_crop_starts(n: usize, len: usize) -> [usize; 4] {
    let span = n.saturating_sub(len) as f64;
    std::array::from_fn(|i| (i as f64 * span / 3.0).round() as usize)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub height: usize,
    pub width: usize,
    pub min_scale: f64,
    pub max_scale: f64,
    pub crop_prob: f64,
    pub flip_prob: f64,
}

impl AugmentConfig {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            min_scale: 0.9,
            max_scale: 1.33,
            crop_prob: 1.0,
            flip_prob: 0.5,
        }
    }
}

/// One geometric transform: resize to `scaled`, crop at `(top, left)`,
/// optionally mirror.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpatialParams {
    pub scaled_h: usize,
    pub scaled_w: usize,
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

impl SpatialParams {
    /// Scale jitter keeps the frame at least as large as the crop.
    pub fn sample(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let s = rng.random_range(cfg.min_scale..=cfg.max_scale);
        let scaled_h = ((h as f64 * s).round() as usize).max(cfg.height);
        let scaled_w = ((w as f64 * s).round() as usize).max(cfg.width);
        let crop = rng.random_bool(cfg.crop_prob);
        let (top, left) = if crop {
            (
                rng.random_range(0..=scaled_h - cfg.height),
                rng.random_range(0..=scaled_w - cfg.width),
            )
        } else {
            ((scaled_h - cfg.height) / 2, (scaled_w - cfg.width) / 2)
        };
        let flip = rng.random_bool(cfg.flip_prob);
        Self {
            scaled_h,
            scaled_w,
            top,
            left,
            flip,
        }
    }

    /// Deterministic center crop, upscaling first when the frame is smaller
    /// than the target.
    pub fn center(h: usize, w: usize, height: usize, width: usize) -> Self {
        let scaled_h = h.max(height);
        let scaled_w = w.max(width);
        Self {
            scaled_h,
            scaled_w,
            top: (scaled_h - height) / 2,
            left: (scaled_w - width) / 2,
            flip: false,
        }
    }
}

/// Bilinear resize of `[F,H,W,C]` with half-pixel centers and edge clamping.
pub fn resize_bilinear(frames: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let d = frames.dims();
    let (f, h, w, c) = (d[0], d[1], d[2], d[3]);
    if (h, w) == (out_h, out_w) {
        return frames.clone();
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(out_h, h), axis(out_w, w));
    let src = frames.data();
    let mut out = Vec::with_capacity(f * out_h * out_w * c);
    for fi in 0..f {
        let base = fi * h * w * c;
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                for ch in 0..c {
                    let at = |y: usize, x: usize| src[base + (y * w + x) * c + ch];
                    let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * wx;
                    let bot = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * wx;
                    out.push(top + (bot - top) * wy);
                }
            }
        }
    }
    Tensor::new(vec![f, out_h, out_w, c], out).expect("resize dims")
}

/// Crops `[top, top+height) × [left, left+width)` and optionally mirrors
/// horizontally.
pub fn crop_flip(frames: &Tensor<f32>, top: usize, left: usize, height: usize, width: usize, flip: bool) -> Result<Tensor<f32>> {
    let d = frames.dims();
    let (f, h, w, c) = (d[0], d[1], d[2], d[3]);
    if top + height > h || left + width > w {
        return Err(CoreError::Geometry(format!(
            "crop {height}×{width} at ({top},{left}) exceeds {h}×{w} frame"
        )));
    }
    let src = frames.data();
    let mut out = Vec::with_capacity(f * height * width * c);
    for fi in 0..f {
        for y in 0..height {
            for x in 0..width {
                let sx = if flip { left + width - 1 - x } else { left + x };
                let at = ((fi * h + top + y) * w + sx) * c;
                out.extend_from_slice(&src[at..at + c]);
            }
        }
    }
    Ok(Tensor::new(vec![f, height, width, c], out)?)
}

/// Applies `p` to RGB frames.
pub fn apply_to_video(v: &Tensor<f32>, p: &SpatialParams, height: usize, width: usize) -> Result<Tensor<f32>> {
    let resized = resize_bilinear(v, p.scaled_h, p.scaled_w);
    crop_flip(&resized, p.top, p.left, height, width, p.flip)
}

/// Applies `p` to flow: displacements scale with the resize and `u` changes
/// sign under a mirror.
pub fn apply_to_flow(fl: &Tensor<f32>, p: &SpatialParams, height: usize, width: usize) -> Result<Tensor<f32>> {
    let d = fl.dims();
    let (sy, sx) = (p.scaled_h as f32 / d[1] as f32, p.scaled_w as f32 / d[2] as f32);
    let mut out = apply_to_video(fl, p, height, width)?;
    let u_sign = if p.flip { -1.0 } else { 1.0 };
    for uv in out.data_mut().chunks_exact_mut(2) {
        uv[0] *= sx * u_sign;
        uv[1] *= sy;
    }
    Ok(out)
}

/// Random scale jitter, crop and flip, applied identically to the paired
/// flow clip.
pub fn augment_spatial(
    v: &VideoClip,
    f: Option<&FlowClip>,
    rng: &mut impl Rng,
    cfg: &AugmentConfig,
) -> Result<(VideoClip, Option<FlowClip>, SpatialParams)> {
    if !(0.9..=1.33).contains(&cfg.min_scale) || !(cfg.min_scale..=1.33).contains(&cfg.max_scale) {
        return Err(CoreError::Invalid(format!(
            "scale range [{}, {}] outside [0.9, 1.33]",
            cfg.min_scale, cfg.max_scale
        )));
    }
    let p = SpatialParams::sample(v.height(), v.width(), cfg, rng);
    let frames = apply_to_video(&v.frames, &p, cfg.height, cfg.width)?;
    let flow = match f {
        Some(fl) => Some(FlowClip {
            frames: apply_to_flow(&fl.frames, &p, cfg.height, cfg.width)?,
        }),
        None => None,
    };
    Ok((VideoClip { frames, fps: v.fps }, flow, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn clip(f: usize, h: usize, w: usize, c: usize, seed: u64) -> Tensor<f32> {
        let mut r = rng::stream(seed, "clip", &[]);
        Tensor::from_fn(vec![f, h, w, c], |_| r.random_range(-1.0f32..1.0))
    }

    #[test]
    fn crop_starts() {
        assert_eq!(four_crop_starts(64, 64), [0, 0, 0, 0]);
        assert_eq!(four_crop_starts(256, 64), [0, 64, 128, 192]);
        assert_eq!(four_crop_starts(100, 64), [0, 12, 24, 36]);
    }

    #[test]
    fn train_start_ranges() {
        let mut r = rng::stream(3, "t", &[]);
        for _ in 0..50 {
            assert_eq!(temporal_sample(64, 64, SampleMode::Train, Some(&mut r)), 0);
            assert!(temporal_sample(100, 64, SampleMode::Train, Some(&mut r)) <= 36);
            assert_eq!(temporal_sample(30, 64, SampleMode::Train, Some(&mut r)), 0);
        }
        let a = temporal_sample(100, 64, SampleMode::Train, Some(&mut rng::stream(9, "t", &[])));
        let b = temporal_sample(100, 64, SampleMode::Train, Some(&mut rng::stream(9, "t", &[])));
        assert_eq!(a, b);
    }

    #[test]
    fn looping_repeats_cyclically() {
        let t = clip(3, 2, 2, 3, 1);
        let l = loop_frames(&t, 7);
        assert_eq!(l.dims(), &[7, 2, 2, 3]);
        let per = 12;
        for i in 0..7 {
            assert_eq!(&l.data()[i * per..(i + 1) * per], &t.data()[(i % 3) * per..(i % 3 + 1) * per]);
        }
    }

    #[test]
    fn identity_transform() {
        let t = clip(2, 16, 16, 3, 2);
        let p = SpatialParams { scaled_h: 16, scaled_w: 16, top: 0, left: 0, flip: false };
        assert_eq!(apply_to_video(&t, &p, 16, 16).unwrap(), t);
    }

    #[test]
    fn double_flip_is_identity() {
        let t = clip(2, 20, 24, 3, 3);
        let once = crop_flip(&t, 2, 3, 16, 16, true).unwrap();
        let twice = crop_flip(&once, 0, 0, 16, 16, true).unwrap();
        assert_eq!(twice, crop_flip(&t, 2, 3, 16, 16, false).unwrap());
    }

    #[test]
    fn flipped_flow_negates_u() {
        let fl = clip(1, 16, 16, 2, 4);
        let p = SpatialParams { scaled_h: 16, scaled_w: 16, top: 0, left: 0, flip: true };
        let out = apply_to_flow(&fl, &p, 16, 16).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let o = (y * 16 + x) * 2;
                let s = (y * 16 + 15 - x) * 2;
                assert_eq!(out.data()[o], -fl.data()[s]);
                assert_eq!(out.data()[o + 1], fl.data()[s + 1]);
            }
        }
    }

    #[test]
    fn crop_too_large_errors() {
        let t = clip(1, 16, 16, 3, 5);
        assert!(crop_flip(&t, 1, 0, 16, 16, false).is_err());
    }

    #[test]
    fn augmentation_keeps_counts_and_pairs() {
        let v = VideoClip::new(clip(3, 40, 36, 3, 6)).unwrap();
        let f = FlowClip::new(clip(3, 40, 36, 2, 7)).unwrap();
        let cfg = AugmentConfig::new(32, 32);
        for seed in 0..20 {
            let (v2, f2, p) = augment_spatial(&v, Some(&f), &mut rng::stream(seed, "a", &[]), &cfg).unwrap();
            assert_eq!(v2.frames.dims(), &[3, 32, 32, 3]);
            let f2 = f2.unwrap();
            assert_eq!(f2.frames.dims(), &[3, 32, 32, 2]);
            assert_eq!(f2.frames, apply_to_flow(&f.frames, &p, 32, 32).unwrap());
        }
    }
}
