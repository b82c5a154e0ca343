//! Audio front end against direct DFTs and closed-form expectations.

use std::f64::consts::PI;

use mmvt_core::audio::{self, AudioClip, SpecMask, SpectrogramStream, Stft, HOP, N_FFT, SAMPLE_RATE, WINDOW};
use mmvt_tensor::Tensor;
use proptest::prelude::*;

fn tone(freq: f64, rate: u32, seconds: f64) -> AudioClip {
    let n = (f64::from(rate) * seconds) as usize;
    AudioClip {
        samples: (0..n).map(|i| (2.0 * PI * freq * i as f64 / f64::from(rate)).sin() as f32).collect(),
        sample_rate: rate,
    }
}

fn naive_power(x: &[f64]) -> Vec<f64> {
    (0..=N_FFT / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in x.iter().enumerate() {
                let a = -2.0 * PI * (k * n) as f64 / N_FFT as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            re * re + im * im
        })
        .collect()
}

#[test]
fn frame_power_matches_direct_dft_and_parseval() {
    let samples: Vec<f32> = (0..1200).map(|i| ((i * 7919) % 1000) as f32 / 500.0 - 1.0).collect();
    let stft = Stft::new(HOP);
    let mut got = vec![0.0; N_FFT / 2 + 1];
    stft.frame_power(&samples, 300, &mut got);
    let windowed: Vec<f64> = (0..WINDOW)
        .map(|n| f64::from(samples[300 + n]) * (0.5 - 0.5 * (2.0 * PI * n as f64 / WINDOW as f64).cos()))
        .collect();
    let want = naive_power(&windowed);
    for (k, (g, w)) in got.iter().zip(&want).enumerate() {
        assert!((g - w).abs() <= 1e-9 * w.max(1.0), "bin {k}: {g} vs {w}");
    }
    let full: f64 = got[0] + got[N_FFT / 2] + 2.0 * got[1..N_FFT / 2].iter().sum::<f64>();
    let energy: f64 = windowed.iter().map(|v| v * v).sum();
    assert!((full - N_FFT as f64 * energy).abs() < 1e-9 * full);
}

/// Filter centres from the textbook mel formula.
fn oracle_centres() -> Vec<f64> {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let (lo, hi) = (mel(125.0), mel(7500.0));
    (1..=64).map(|k| inv(lo + (hi - lo) * k as f64 / 65.0)).collect()
}

#[test]
fn one_kilohertz_lands_in_mel_bin_twenty() {
    let centres = oracle_centres();
    let fb = audio::default_filterbank();
    for (a, b) in fb.centers_hz().iter().zip(&centres) {
        assert!((a - b).abs() < 1e-9);
    }
    let nearest = (0..64).min_by(|&a, &b| (centres[a] - 1000.0).abs().total_cmp(&(centres[b] - 1000.0).abs())).unwrap();
    assert!(nearest.abs_diff(20) <= 1);

    let s = audio::extract_stream(&tone(1000.0, SAMPLE_RATE, 2.56), 64).unwrap();
    let image = &s.data.data()[10 * 96 * 64..11 * 96 * 64];
    let mut energy = [0.0f64; 64];
    for row in image.chunks_exact(64) {
        for (e, v) in energy.iter_mut().zip(row) {
            *e += f64::from(*v);
        }
    }
    let peak = (0..64).max_by(|&a, &b| energy[a].total_cmp(&energy[b])).unwrap();
    assert!(peak.abs_diff(nearest) <= 1 && peak.abs_diff(20) <= 1, "peak {peak}");
}

#[test]
fn resampled_tone_keeps_its_frequency() {
    let a = audio::resample_linear(&tone(1000.0, 44_100, 0.5), SAMPLE_RATE);
    assert_eq!(a.samples.len(), 8000);
    let x: Vec<f64> = a.samples[1000..1000 + N_FFT].iter().map(|&v| f64::from(v)).collect();
    let p = naive_power(&x);
    let peak = (0..p.len()).max_by(|&i, &j| p[i].total_cmp(&p[j])).unwrap();
    assert_eq!(peak, 32, "1 kHz is bin 32 of a 512-point DFT at 16 kHz");
}

#[test]
fn stereo_wav_is_averaged_and_resampled() {
    let mut buf = std::io::Cursor::new(Vec::new());
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: 8000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::new(&mut buf, spec).unwrap();
    for _ in 0..800 {
        w.write_sample(16384i16).unwrap();
        w.write_sample(-8192i16).unwrap();
    }
    w.finalize().unwrap();
    let a = audio::ingest_audio(buf.get_ref()).unwrap();
    assert_eq!((a.sample_rate, a.samples.len()), (SAMPLE_RATE, 1600));
    assert!(a.samples.iter().all(|&v| (v - 0.125).abs() < 1e-6));
    assert!(audio::ingest_audio(b"RIFF....WAVEjunk").is_err());
}

#[test]
fn two_point_five_six_seconds_give_sixty_four_images() {
    let s = audio::extract_stream(&tone(440.0, SAMPLE_RATE, 2.56), 64).unwrap();
    assert_eq!(s.data.dims(), &[64, 96, 64]);
    assert!(s.data.data().iter().all(|v| v.is_finite()));
}

proptest! {
    #[test]
    fn normalization_hits_both_endpoints(vals in prop::collection::vec(-50.0f32..50.0, 2..200)) {
        prop_assume!(vals.iter().any(|&v| v != vals[0]));
        let s = SpectrogramStream { data: Tensor::new(vec![vals.len()], vals).unwrap(), normalized: false };
        let n = audio::normalize_stream(&s);
        let lo = n.data.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = n.data.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        prop_assert_eq!((lo, hi), (-1.0, 1.0));
    }

    #[test]
    fn masked_cells_follow_inclusion_exclusion(t in 0usize..=96, f in 0usize..=64, ts in 0usize..96, fs in 0usize..64) {
        let mask = SpecMask {
            time_start: ts.min(96 - t),
            time: t,
            freq_start: fs.min(64 - f),
            freq: f,
        };
        let ones = SpectrogramStream { data: Tensor::full(vec![2, 96, 64], 1.0f32), normalized: true };
        let out = mask.apply(&ones);
        for image in out.data.data().chunks_exact(96 * 64) {
            prop_assert_eq!(image.iter().filter(|&&v| v == 0.0).count(), 96 * f + 64 * t - t * f);
        }
    }
}
