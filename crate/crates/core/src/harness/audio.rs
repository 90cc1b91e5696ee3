use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied before the natural log.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogMelOptions {
    pub n_mels: usize,
    pub window_ms: f64,
    /// Hop as a fraction of the window length.
    pub hop_fraction: f64,
    pub fmin: f64,
    /// `None` means Nyquist.
    pub fmax: Option<f64>,
}

impl Default for LogMelOptions {
    fn default() -> Self {
        Self {
            n_mels: 40,
            window_ms: 40.0,
            hop_fraction: 0.625,
            fmin: 0.0,
            fmax: None,
        }
    }
}

impl LogMelOptions {
    pub fn window_len(&self, sample_rate: u32) -> usize {
        (self.window_ms * 1e-3 * sample_rate as f64).round() as usize
    }

    pub fn hop_len(&self, sample_rate: u32) -> usize {
        ((self.window_len(sample_rate) as f64 * self.hop_fraction).round() as usize).max(1)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the triangular filters.
pub fn mel_band_centers(opts: &LogMelOptions, sample_rate: u32) -> Vec<f64> {
    mel_edges(opts, sample_rate)[1..=opts.n_mels].to_vec()
}

fn mel_edges(opts: &LogMelOptions, sample_rate: u32) -> Vec<f64> {
    let fmax = opts.fmax.unwrap_or(sample_rate as f64 / 2.0);
    let (lo, hi) = (hz_to_mel(opts.fmin), hz_to_mel(fmax));
    (0..opts.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (opts.n_mels + 1) as f64))
        .collect()
}

/// `n_mels × (n_fft/2 + 1)` triangular weights on HTK-spaced edges,
/// unnormalized (peak 1).
fn mel_filterbank(opts: &LogMelOptions, sample_rate: u32, n_fft: usize) -> Vec<Vec<f64>> {
    let edges = mel_edges(opts, sample_rate);
    let bins = n_fft / 2 + 1;
    let freq = |k: usize| k as f64 * sample_rate as f64 / n_fft as f64;
    (0..opts.n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = freq(k);
                    let up = (f - l) / (c - l);
                    let down = (r - f) / (r - c);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Log mel-band energies, `(n_mels, frames)` with
/// `frames = ⌊(len − win) / hop⌋ + 1`. Frames are Hann-windowed and
/// transformed at the window length; band energies are filter-weighted
/// magnitudes.
pub fn logmel_extract(waveform: &[f32], sample_rate: u32, opts: &LogMelOptions) -> Result<Tensor<f32>> {
    if waveform.is_empty() {
        return Err(Error::Audio("empty waveform".into()));
    }
    if opts.n_mels == 0 || sample_rate == 0 {
        return Err(Error::Audio("n_mels and sample rate must be positive".into()));
    }
    let win = opts.window_len(sample_rate);
    let hop = opts.hop_len(sample_rate);
    if win < 2 {
        return Err(Error::Audio(format!("window of {win} samples is too short")));
    }
    if waveform.len() < win {
        return Err(Error::Audio(format!(
            "waveform of {} samples is shorter than one {win}-sample window",
            waveform.len()
        )));
    }
    let frames = (waveform.len() - win) / hop + 1;
    let hann: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / win as f64).cos())
        .collect();
    let bank = mel_filterbank(opts, sample_rate, win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win);
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    let mut out = vec![0f32; opts.n_mels * frames];
    for t in 0..frames {
        let start = t * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = Complex::new(waveform[start + i] as f64 * hann[i], 0.0);
        }
        fft.process(&mut buf);
        let mag: Vec<f64> = buf[..win / 2 + 1].iter().map(|c| c.norm()).collect();
        for (m, weights) in bank.iter().enumerate() {
            let e: f64 = weights.iter().zip(&mag).map(|(w, a)| w * a).sum();
            out[m * frames + t] = e.max(LOG_FLOOR).ln() as f32;
        }
    }
    Tensor::new(vec![opts.n_mels, frames], out)
}

/// Mono PCM samples scaled to `[-1, 1)` and the sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Audio(format!(
            "{} channels, only mono is supported",
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || !matches!(spec.bits_per_sample, 16 | 24) {
        return Err(Error::Audio(format!(
            "{:?} {}-bit samples, only 16- and 24-bit PCM are supported",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let scale = 1.0 / (1u32 << (spec.bits_per_sample - 1)) as f32;
    let samples = reader
        .into_samples::<i32>()
        .map(|s| s.map(|v| v as f32 * scale))
        .collect::<std::result::Result<Vec<f32>, _>>()
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    Ok((samples, spec.sample_rate))
}

/// Linear-interpolation resampling. Output length is
/// `⌊(len − 1)·to/from⌋ + 1`.
pub fn resample_linear(samples: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || samples.len() < 2 {
        return samples.to_vec();
    }
    let ratio = from as f64 / to as f64;
    let out_len = ((samples.len() - 1) as f64 / ratio).floor() as usize + 1;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = pos.floor() as usize;
            let frac = pos - j as f64;
            let a = samples[j] as f64;
            let b = samples[(j + 1).min(samples.len() - 1)] as f64;
            (a + (b - a) * frac) as f32
        })
        .collect()
}
