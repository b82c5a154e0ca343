//! Audio → frame-aligned log-mel spectrogram images.
//!
//! Audio is mixed to mono and resampled to 16 kHz. A 25 ms periodic Hann
//! window (400 samples, zero-padded to a 512-point FFT) slides with a 10 ms
//! hop; power spectra go through 64 HTK-mel triangular filters spanning
//! 125–7500 Hz and are log-compressed. Video frame `i` (25 fps) gets the 96
//! STFT frames starting at `i·40 ms`, i.e. STFT rows `4i..4i+96`.

use std::f64::consts::PI;
use std::io::Cursor;
use std::sync::Arc;

use mmvt_tensor::Tensor;
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{CoreError, Result};
use crate::model_spec::{SPEC_BINS, SPEC_FRAMES};

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW: usize = 400;
pub const HOP: usize = 160;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 64;
pub const F_LO: f64 = 125.0;
pub const F_HI: f64 = 7500.0;
pub const LOG_EPS: f64 = 1e-6;
pub const VIDEO_FPS: usize = 25;
/// Max SpecAugment mask lengths (time frames, mel bins).
pub const MAX_TIME_MASK: usize = 96;
pub const MAX_FREQ_MASK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

/// Decodes a PCM WAV (8/16/24/32-bit integer or 32-bit float), averages
/// channels and resamples to 16 kHz.
pub fn ingest_audio(wav: &[u8]) -> Result<AudioClip> {
    let reader = hound::WavReader::new(Cursor::new(wav))
        .map_err(|e| CoreError::Audio(format!("malformed WAV: {e}")))?;
    let spec = reader.spec();
    let channels = usize::from(spec.channels);
    if channels == 0 || spec.sample_rate == 0 {
        return Err(CoreError::Audio("WAV declares zero channels or zero rate".into()));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CoreError::Audio(e.to_string()))?,
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| (f64::from(v) * scale) as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| CoreError::Audio(e.to_string()))?
        }
        (fmt, bits) => {
            return Err(CoreError::Audio(format!("unsupported encoding {fmt:?} {bits}-bit")));
        }
    };
    let mono: Vec<f32> = interleaved
        .chunks_exact(channels)
        .map(|frame| (frame.iter().map(|&v| f64::from(v)).sum::<f64>() / channels as f64) as f32)
        .collect();
    Ok(resample_linear(
        &AudioClip {
            samples: mono,
            sample_rate: spec.sample_rate,
        },
        SAMPLE_RATE,
    ))
}

/// Linear-interpolation resampler; output length `⌊N·rate/sr⌋`.
pub fn resample_linear(a: &AudioClip, rate: u32) -> AudioClip {
    if a.sample_rate == rate || a.samples.is_empty() {
        return AudioClip {
            samples: a.samples.clone(),
            sample_rate: rate,
        };
    }
    let n = a.samples.len();
    let n_out = (n as u64 * u64::from(rate) / u64::from(a.sample_rate)) as usize;
    let step = f64::from(a.sample_rate) / f64::from(rate);
    let samples = (0..n_out)
        .map(|i| {
            let pos = i as f64 * step;
            let j = pos.floor() as usize;
            let frac = pos - j as f64;
            let x0 = f64::from(a.samples[j.min(n - 1)]);
            let x1 = f64::from(a.samples[(j + 1).min(n - 1)]);
            (x0 + (x1 - x0) * frac) as f32
        })
        .collect();
    AudioClip {
        samples,
        sample_rate: rate,
    }
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Power spectrogram `[frames × (N_FFT/2+1)]` with a 400-sample window.
pub struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    hop: usize,
}

impl Stft {
    pub fn new(hop: usize) -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(N_FFT),
            window: hann(WINDOW),
            hop,
        }
    }

    pub fn frame_count(&self, len: usize) -> usize {
        if len < WINDOW {
            0
        } else {
            1 + (len - WINDOW) / self.hop
        }
    }

    /// One-sided power spectrum of the window starting at `start`.
    pub fn frame_power(&self, samples: &[f32], start: usize, out: &mut [f64]) {
        let mut buf: Vec<Complex<f64>> = (0..N_FFT)
            .map(|n| {
                let x = if n < WINDOW {
                    f64::from(samples[start + n]) * self.window[n]
                } else {
                    0.0
                };
                Complex::new(x, 0.0)
            })
            .collect();
        self.fft.process(&mut buf);
        for (o, c) in out.iter_mut().zip(&buf[..=N_FFT / 2]) {
            *o = c.norm_sqr();
        }
    }

    pub fn power(&self, samples: &[f32]) -> Result<Vec<Vec<f64>>> {
        let frames = self.frame_count(samples.len());
        if frames == 0 {
            return Err(CoreError::Audio(format!(
                "clip of {} samples is shorter than one {WINDOW}-sample window",
                samples.len()
            )));
        }
        Ok((0..frames)
            .map(|f| {
                let mut row = vec![0.0; N_FFT / 2 + 1];
                self.frame_power(samples, f * self.hop, &mut row);
                row
            })
            .collect())
    }
}

/// Power spectra of a 16 kHz clip, one row per STFT frame.
pub fn stft_power(a: &AudioClip, hop: usize) -> Result<Vec<Vec<f64>>> {
    if a.sample_rate != SAMPLE_RATE {
        return Err(CoreError::Audio(format!(
            "stft expects {SAMPLE_RATE} Hz audio, got {}",
            a.sample_rate
        )));
    }
    Stft::new(hop).power(&a.samples)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters with peaks equally spaced on the mel scale.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `[n_mels][n_fft/2+1]`
    pub weights: Vec<Vec<f64>>,
    /// `n_mels + 2` band edges in Hz; filter `m` spans `edges[m]..edges[m+2]`.
    pub edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.weights.len()
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.edges_hz[1..self.edges_hz.len() - 1]
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum())
            .collect()
    }
}

pub fn build_mel_filterbank(
    n_mels: usize,
    f_lo: f64,
    f_hi: f64,
    n_fft: usize,
    sample_rate: u32,
) -> Result<MelFilterbank> {
    let nyquist = f64::from(sample_rate) / 2.0;
    if n_mels == 0 || !(0.0..f_hi).contains(&f_lo) || f_hi > nyquist || n_fft < 2 {
        return Err(CoreError::Audio(format!(
            "invalid filterbank: {n_mels} mels over [{f_lo}, {f_hi}] Hz at {sample_rate} Hz"
        )));
    }
    let (m_lo, m_hi) = (hz_to_mel(f_lo), hz_to_mel(f_hi));
    let step = (m_hi - m_lo) / (n_mels + 1) as f64;
    let edges_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(m_lo + step * i as f64))
        .collect();
    let bins = n_fft / 2 + 1;
    let bin_hz = f64::from(sample_rate) / n_fft as f64;
    let weights = (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = ((f - lo) / (mid - lo)).min((hi - f) / (hi - mid));
                    if f > f_lo && f < f_hi { w.max(0.0) } else { 0.0 }
                })
                .collect()
        })
        .collect();
    Ok(MelFilterbank { weights, edges_hz })
}

pub fn default_filterbank() -> MelFilterbank {
    build_mel_filterbank(N_MELS, F_LO, F_HI, N_FFT, SAMPLE_RATE).expect("default filterbank")
}

/// One 96×64 image per video frame, stored as `[F, 96, 64]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramStream {
    pub data: Tensor<f32>,
    pub normalized: bool,
}

impl SpectrogramStream {
    pub fn frames(&self) -> usize {
        self.data.dims()[0]
    }
}

/// Log-mel images for `n_frames` video frames at 25 fps. Audio past the end
/// of the clip reads as silence.
pub fn extract_stream(a: &AudioClip, n_frames: usize) -> Result<SpectrogramStream> {
    if n_frames == 0 {
        return Err(CoreError::Audio("n_frames must be positive".into()));
    }
    if a.sample_rate != SAMPLE_RATE {
        return Err(CoreError::Audio(format!(
            "extraction expects {SAMPLE_RATE} Hz audio, got {}",
            a.sample_rate
        )));
    }
    let stride = (SAMPLE_RATE as usize / VIDEO_FPS) / HOP;
    let rows = stride * (n_frames - 1) + SPEC_FRAMES;
    let needed = (rows - 1) * HOP + WINDOW;
    let mut samples = a.samples.clone();
    samples.resize(needed.max(samples.len()), 0.0);
    let stft = Stft::new(HOP);
    let fb = default_filterbank();
    let mut power = vec![0.0; N_FFT / 2 + 1];
    let log_mel: Vec<Vec<f32>> = (0..rows)
        .map(|r| {
            stft.frame_power(&samples, r * HOP, &mut power);
            fb.apply(&power)
                .into_iter()
                .map(|e| (e + LOG_EPS).ln() as f32)
                .collect()
        })
        .collect();
    let mut data = Vec::with_capacity(n_frames * SPEC_FRAMES * SPEC_BINS);
    for i in 0..n_frames {
        for row in &log_mel[i * stride..i * stride + SPEC_FRAMES] {
            data.extend_from_slice(row);
        }
    }
    Ok(SpectrogramStream {
        data: Tensor::new(vec![n_frames, SPEC_FRAMES, SPEC_BINS], data)?,
        normalized: false,
    })
}

/// Per-clip min-max map onto `[-1, 1]`; a constant stream becomes zeros.
pub fn normalize_stream(s: &SpectrogramStream) -> SpectrogramStream {
    let vals = s.data.data();
    let (lo, hi) = vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(f64::from(v)), hi.max(f64::from(v)))
    });
    let range = hi - lo;
    let mut data = s.data.clone();
    for v in data.data_mut() {
        *v = if range > 0.0 {
            ((f64::from(*v) - lo) / range * 2.0 - 1.0).clamp(-1.0, 1.0) as f32
        } else {
            0.0
        };
    }
    SpectrogramStream {
        data,
        normalized: true,
    }
}

/// Sampled SpecAugment masks: `time` frames from `time_start`, `freq` bins
/// from `freq_start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecMask {
    pub time_start: usize,
    pub time: usize,
    pub freq_start: usize,
    pub freq: usize,
}

impl SpecMask {
    pub fn sample(rng: &mut impl Rng, max_time: usize, max_freq: usize) -> Self {
        let time = rng.random_range(0..=max_time.min(SPEC_FRAMES));
        let time_start = rng.random_range(0..=SPEC_FRAMES - time);
        let freq = rng.random_range(0..=max_freq.min(SPEC_BINS));
        let freq_start = rng.random_range(0..=SPEC_BINS - freq);
        Self {
            time_start,
            time,
            freq_start,
            freq,
        }
    }

    pub fn covers(&self, t: usize, f: usize) -> bool {
        (self.time_start..self.time_start + self.time).contains(&t)
            || (self.freq_start..self.freq_start + self.freq).contains(&f)
    }

    pub fn apply(&self, s: &SpectrogramStream) -> SpectrogramStream {
        let mut data = s.data.clone();
        for image in data.data_mut().chunks_exact_mut(SPEC_FRAMES * SPEC_BINS) {
            for t in 0..SPEC_FRAMES {
                for f in 0..SPEC_BINS {
                    if self.covers(t, f) {
                        image[t * SPEC_BINS + f] = 0.0;
                    }
                }
            }
        }
        SpectrogramStream {
            data,
            normalized: s.normalized,
        }
    }
}

/// One time mask and one frequency mask, shared by every image of the stream.
pub fn spec_augment(
    s: &SpectrogramStream,
    rng: &mut impl Rng,
    max_time: usize,
    max_freq: usize,
) -> (SpectrogramStream, SpecMask) {
    let mask = SpecMask::sample(rng, max_time, max_freq);
    (mask.apply(s), mask)
}
