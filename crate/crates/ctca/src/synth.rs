//! Synthetic spoken-word corpus.
//!
//! Word `k` is a fixed two-part tone pattern lasting
//! `150 + (47 k mod 151)` ms: the first half sounds grid tone `a`, the second
//! grid tone `b` (each with a half-amplitude second harmonic and 10 ms
//! ramps), with `a = 3k mod 10` and `b = a + offset[k / 10] mod 10`. Words
//! are separated by 50 ms of silence and the utterance is padded by 50 ms on
//! both ends. Gaussian noise is added at the requested SNR.

use anyhow::bail;
use ctca_core::rng::{self, Pcg32};
use rand::RngExt;
use rand_distr::StandardNormal;

use crate::features::Waveform;

pub const WORDS: [&str; 50] = [
    "yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go", //
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", //
    "red", "blue", "green", "cat", "dog", "bird", "fish", "tree", "sun", "moon", //
    "star", "rain", "snow", "wind", "fire", "rock", "sand", "lake", "hill", "road", //
    "book", "door", "lamp", "cup", "key", "box", "bell", "coin", "ship", "kite",
];

const GRID_HZ: [f64; 10] = [400.0, 600.0, 850.0, 1150.0, 1500.0, 1900.0, 2350.0, 2850.0, 3400.0, 4000.0];
const OFFSETS: [usize; 5] = [5, 3, 7, 2, 9];
const GAP_MS: f64 = 50.0;
const RAMP_MS: f64 = 10.0;
const AMPLITUDE: f64 = 0.3;

const TEXT_STREAM: u64 = 10;
const NOISE_STREAM: u64 = 11;

/// Duration in ms and the two grid tones of word `k`.
pub fn word_pattern(k: usize) -> (f64, f64, f64) {
    let ms = 150.0 + ((k * 47) % 151) as f64;
    let a = (3 * k) % 10;
    let b = (a + OFFSETS[k / 10]) % 10;
    (ms, GRID_HZ[a], GRID_HZ[b])
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Number of distinct words (at most 50).
    pub vocab: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub words_min: usize,
    pub words_max: usize,
    /// Signal-to-noise ratio in dB; infinite means no noise.
    pub snr_db: f64,
    pub sample_rate: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab: 5,
            train: 200,
            dev: 40,
            test: 40,
            words_min: 1,
            words_max: 3,
            snr_db: 20.0,
            sample_rate: 16000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.vocab == 0 || self.vocab > WORDS.len() {
            bail!("synthetic vocabulary must have 1..={} words, got {}", WORDS.len(), self.vocab);
        }
        if self.words_min == 0 || self.words_min > self.words_max {
            bail!("words per utterance range {}..={} is empty", self.words_min, self.words_max);
        }
        if self.sample_rate < 8000 {
            bail!("sample rate {} cannot hold the tone grid", self.sample_rate);
        }
        if self.snr_db.is_nan() {
            bail!("snr_db must be a number");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthUtterance {
    pub id: String,
    pub transcript: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthCorpus {
    pub train: Vec<SynthUtterance>,
    pub dev: Vec<SynthUtterance>,
    pub test: Vec<SynthUtterance>,
}

/// Transcripts of the three splits, drawn uniformly from the first
/// `cfg.vocab` words.
pub fn synth_corpus(cfg: &SynthConfig, seed: u64) -> anyhow::Result<SynthCorpus> {
    cfg.validate()?;
    let mut r = rng::stream(seed, TEXT_STREAM);
    let mut split = |name: &str, n: usize| -> Vec<SynthUtterance> {
        (0..n)
            .map(|i| {
                let len = r.random_range(cfg.words_min..=cfg.words_max);
                let words: Vec<&str> = (0..len).map(|_| WORDS[r.random_range(0..cfg.vocab)]).collect();
                SynthUtterance { id: format!("{name}-{i:05}"), transcript: words.join(" ") }
            })
            .collect()
    };
    Ok(SynthCorpus { train: split("train", cfg.train), dev: split("dev", cfg.dev), test: split("test", cfg.test) })
}

fn noise_rng(seed: u64, id: &str) -> Pcg32 {
    // FNV-1a over the id, mixed with the corpus seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    rng::stream(seed ^ h, NOISE_STREAM)
}

fn push_tone(out: &mut Vec<f64>, freq: f64, n: usize, rate: f64) {
    let ramp = ((RAMP_MS * 1e-3 * rate) as usize).min(n / 2).max(1);
    for i in 0..n {
        let t = i as f64 / rate;
        let w = 2.0 * std::f64::consts::PI * freq * t;
        let env = (i.min(n - 1 - i) as f64 / ramp as f64).min(1.0);
        out.push(AMPLITUDE * env * (w.sin() + 0.5 * (2.0 * w).sin()));
    }
}

/// Waveform of `transcript`; noise depends only on `(seed, id)`.
pub fn render(cfg: &SynthConfig, seed: u64, id: &str, transcript: &str) -> anyhow::Result<Waveform> {
    cfg.validate()?;
    let rate = cfg.sample_rate as f64;
    let gap = (GAP_MS * 1e-3 * rate) as usize;
    let mut s = vec![0.0; gap];
    for (i, w) in transcript.split_whitespace().enumerate() {
        let Some(k) = WORDS[..cfg.vocab].iter().position(|x| *x == w) else {
            bail!("word {w:?} is not in the {}-word synthetic vocabulary", cfg.vocab);
        };
        if i > 0 {
            s.extend(std::iter::repeat_n(0.0, gap));
        }
        let (ms, fa, fb) = word_pattern(k);
        let n = (ms * 1e-3 * rate) as usize;
        push_tone(&mut s, fa, n / 2, rate);
        push_tone(&mut s, fb, n - n / 2, rate);
    }
    s.extend(std::iter::repeat_n(0.0, gap));
    if cfg.snr_db.is_finite() {
        let power = s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64;
        let sigma = (power / 10f64.powf(cfg.snr_db / 10.0)).sqrt();
        let mut r = noise_rng(seed, id);
        for v in &mut s {
            let z: f64 = r.sample(StandardNormal);
            *v += sigma * z;
        }
    }
    Waveform::new(s, cfg.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patterns_are_distinct_and_in_range() {
        let mut seen = std::collections::BTreeSet::new();
        for k in 0..WORDS.len() {
            let (ms, a, b) = word_pattern(k);
            assert!((150.0..=300.0).contains(&ms));
            assert_ne!(a, b);
            assert!(seen.insert((a as u64, b as u64)));
        }
        let uniq: std::collections::BTreeSet<_> = WORDS.iter().collect();
        assert_eq!(uniq.len(), WORDS.len());
    }

    #[test]
    fn corpus_is_deterministic() {
        let cfg = SynthConfig { train: 10, dev: 2, test: 2, words_min: 3, words_max: 3, ..Default::default() };
        let a = synth_corpus(&cfg, 4).unwrap();
        assert_eq!(a, synth_corpus(&cfg, 4).unwrap());
        assert!(a.train.iter().all(|u| u.transcript.split(' ').count() == 3));
        let u = &a.train[0];
        assert_eq!(render(&cfg, 4, &u.id, &u.transcript).unwrap(), render(&cfg, 4, &u.id, &u.transcript).unwrap());
    }

    #[test]
    fn too_many_words_rejected() {
        let cfg = SynthConfig { vocab: 51, ..Default::default() };
        assert!(synth_corpus(&cfg, 0).is_err());
    }
}
