//! Log-mel filterbank features, speed perturbation and WAV input.
//!
//! Pipeline per utterance: pre-emphasis 0.97 over the whole signal, then for
//! each 25 ms window with 10 ms hop a Hamming window, zero-padded FFT
//! magnitude, triangular mel filters spaced evenly on
//! `mel(f) = 2595 log10(1 + f / 700)` between 0 Hz and Nyquist, and a
//! natural log with floor `1e-10`.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context};
use ctca_core::Tensor;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> anyhow::Result<Self> {
        if sample_rate == 0 {
            bail!("sample rate must be positive");
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            bail!("sample {i} is not finite");
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub mel_bins: usize,
    pub preemphasis: f64,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { window_ms: 25.0, hop_ms: 10.0, mel_bins: 80, preemphasis: 0.97, log_floor: 1e-10 }
    }
}

impl FeatureConfig {
    pub fn window_len(&self, rate: u32) -> usize {
        (self.window_ms * 1e-3 * rate as f64).round() as usize
    }

    pub fn hop_len(&self, rate: u32) -> usize {
        (self.hop_ms * 1e-3 * rate as f64).round() as usize
    }

    /// FFT size: 512 or the next power of two holding one window.
    pub fn n_fft(&self, rate: u32) -> usize {
        self.window_len(rate).next_power_of_two().max(512)
    }

    /// `floor((len - window) / hop) + 1`, or `None` below one window.
    pub fn num_frames(&self, len: usize, rate: u32) -> Option<usize> {
        let w = self.window_len(rate);
        (len >= w).then(|| (len - w) / self.hop_len(rate) + 1)
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the mel filters.
pub fn mel_centers(bins: usize, rate: u32) -> Vec<f64> {
    let top = hz_to_mel(rate as f64 / 2.0);
    (1..=bins).map(|m| mel_to_hz(top * m as f64 / (bins + 1) as f64)).collect()
}

/// Filter weights `[bins][n_fft / 2 + 1]`.
fn mel_bank(bins: usize, n_fft: usize, rate: u32) -> Vec<Vec<f64>> {
    let top = hz_to_mel(rate as f64 / 2.0);
    let edges: Vec<f64> = (0..bins + 2).map(|i| mel_to_hz(top * i as f64 / (bins + 1) as f64)).collect();
    let n_bins = n_fft / 2 + 1;
    (0..bins)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * rate as f64 / n_fft as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Reusable filterbank for one sample rate.
pub struct Filterbank {
    cfg: FeatureConfig,
    rate: u32,
    window: Vec<f64>,
    bank: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl Filterbank {
    pub fn new(cfg: FeatureConfig, rate: u32) -> anyhow::Result<Self> {
        if cfg.mel_bins == 0 || cfg.hop_len(rate) == 0 || cfg.window_len(rate) == 0 {
            bail!("feature config yields empty windows or no mel bins");
        }
        let w = cfg.window_len(rate);
        let window = (0..w)
            .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (w - 1).max(1) as f64).cos())
            .collect();
        let n_fft = cfg.n_fft(rate);
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self { cfg, rate, window, bank: mel_bank(cfg.mel_bins, n_fft, rate), fft })
    }

    /// `[frames, mel_bins]` log-mel energies.
    pub fn compute(&self, wave: &Waveform) -> anyhow::Result<Tensor> {
        if wave.sample_rate != self.rate {
            bail!("waveform rate {} differs from filterbank rate {}", wave.sample_rate, self.rate);
        }
        let Some(frames) = self.cfg.num_frames(wave.len(), self.rate) else {
            bail!(
                "waveform of {} samples is shorter than one {} ms window",
                wave.len(),
                self.cfg.window_ms
            );
        };
        let x = &wave.samples;
        let mut emph = Vec::with_capacity(x.len());
        emph.push(x[0]);
        for n in 1..x.len() {
            emph.push(x[n] - self.cfg.preemphasis * x[n - 1]);
        }
        let hop = self.cfg.hop_len(self.rate);
        let n_fft = self.cfg.n_fft(self.rate);
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut mag = vec![0.0; n_fft / 2 + 1];
        let mut out = Vec::with_capacity(frames * self.cfg.mel_bins);
        for f in 0..frames {
            let start = f * hop;
            for (i, b) in buf.iter_mut().enumerate() {
                let v = if i < self.window.len() { emph[start + i] * self.window[i] } else { 0.0 };
                *b = Complex::new(v, 0.0);
            }
            self.fft.process(&mut buf);
            for (m, b) in mag.iter_mut().zip(&buf) {
                *m = b.norm();
            }
            for filt in &self.bank {
                let e: f64 = filt.iter().zip(&mag).map(|(w, m)| w * m).sum();
                out.push(e.max(self.cfg.log_floor).ln());
            }
        }
        Ok(Tensor::new(vec![frames, self.cfg.mel_bins], out)?)
    }
}

/// Log-mel features of `wave`.
pub fn mel_filterbank(wave: &Waveform, cfg: &FeatureConfig) -> anyhow::Result<Tensor> {
    Filterbank::new(*cfg, wave.sample_rate)?.compute(wave)
}

/// Resamples so the duration scales by `1 / factor` (linear interpolation).
pub fn speed_perturb(wave: &Waveform, factor: f64) -> anyhow::Result<Waveform> {
    if !(0.5..=2.0).contains(&factor) {
        bail!("speed factor {factor} outside [0.5, 2.0]");
    }
    if factor == 1.0 {
        return Ok(wave.clone());
    }
    let n = wave.len();
    let out_len = (n as f64 / factor).round() as usize;
    let x = &wave.samples;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * factor;
            let j = pos.floor() as usize;
            if j + 1 >= n {
                x[n.saturating_sub(1).min(j)]
            } else {
                let frac = pos - j as f64;
                x[j] * (1.0 - frac) + x[j + 1] * frac
            }
        })
        .collect();
    Waveform::new(samples, wave.sample_rate)
}

/// Reads a 16-bit signed PCM mono RIFF file.
pub fn read_wav(path: &Path) -> anyhow::Result<Waveform> {
    let mut r = hound::WavReader::open(path).with_context(|| format!("opening {}", path.display()))?;
    let spec = r.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 || spec.channels != 1 {
        bail!(
            "{}: expected 16-bit PCM mono, found {}-bit {:?} with {} channel(s)",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format,
            spec.channels
        );
    }
    let samples = r
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .with_context(|| format!("reading {}", path.display()))?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit signed PCM mono, clamping to [-1, 1].
pub fn write_wav(path: &Path, wave: &Waveform) -> anyhow::Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).with_context(|| format!("creating {}", path.display()))?;
    for &s in &wave.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}
