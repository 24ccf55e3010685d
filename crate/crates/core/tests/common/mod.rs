#![allow(dead_code)]

use ctca_core::attention::WeightMode;
use ctca_core::ctc::CtcPosteriors;
use ctca_core::encoder::EncoderConfig;
use ctca_core::model::ModelConfig;
use ctca_core::rng::{self, Pcg32};
use ctca_core::search::SequenceScorer;
use ctca_core::Tensor;

pub fn rng(seed: u64) -> Pcg32 {
    rng::stream(seed, 1000)
}

pub fn uniform_vec(r: &mut Pcg32, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng::uniform(r, lo, hi)).collect()
}

pub fn random_tensor(r: &mut Pcg32, dims: &[usize], scale: f64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), uniform_vec(r, n, -scale, scale)).unwrap()
}

/// Row-normalized random posteriors, every entry bounded away from zero.
pub fn random_posteriors(r: &mut Pcg32, frames: usize, units: usize) -> CtcPosteriors {
    let mut data = Vec::with_capacity(frames * units);
    for _ in 0..frames {
        let row = uniform_vec(r, units, 0.05, 1.0);
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    CtcPosteriors::new(Tensor::new(vec![frames, units], data).unwrap(), 0).unwrap()
}

pub fn toy_model_config(vocab_size: usize, ctc_bilstm: bool, mode: WeightMode) -> ModelConfig {
    ModelConfig {
        vocab_size,
        encoder: EncoderConfig { input_dim: 3, cnn_layers: 2, cnn_channels: 2, bilstm_layers: 1, cells_per_direction: 2 },
        ctc_bilstm,
        att_dim: 2,
        location_filters: 2,
        location_width: 3,
        embed_dim: 2,
        dec_units: 2,
        dec_layers: 2,
        weight_mode: mode,
    }
}

pub fn toy_features(r: &mut Pcg32, frames: usize) -> Tensor {
    random_tensor(r, &[frames, 3], 1.0)
}

fn mix(mut h: u64, v: u64) -> u64 {
    h ^= v.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
    h.wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// A scorer whose next-unit distribution is a fixed pseudo-random function
/// of the whole prefix.
#[derive(Debug, Clone)]
pub struct TableScorer {
    pub seed: u64,
    pub vocab: usize,
}

impl TableScorer {
    pub fn dist(&self, prefix: &[u32]) -> Vec<f64> {
        let mut h = mix(self.seed, 0xABCD);
        for &p in prefix {
            h = mix(h, p as u64 + 1);
        }
        let mut r = rng::stream(h, 7);
        let logits = uniform_vec(&mut r, self.vocab, -3.0, 3.0);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln() + m;
        logits.iter().map(|l| l - z).collect()
    }
}

impl SequenceScorer for TableScorer {
    type State = Vec<u32>;

    fn start(&mut self) -> ctca_core::Result<(Vec<u32>, Vec<f64>)> {
        Ok((Vec::new(), self.dist(&[])))
    }

    fn advance(&mut self, state: &Vec<u32>, token: u32) -> ctca_core::Result<(Vec<u32>, Vec<f64>)> {
        let mut s = state.clone();
        s.push(token);
        let d = self.dist(&s);
        Ok((s, d))
    }
}
