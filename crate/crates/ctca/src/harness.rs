//! Experiment grids: the α sweep and the encoder-depth × CTC-branch
//! ablation with and without LM fusion.

use std::fmt::Write as _;

use anyhow::ensure;
use ctca_core::eval::WerReport;
use ctca_core::subword::SubwordVocab;
use ctca_core::training::Executor;

use crate::config::RunConfig;
use crate::formats::Manifest;
use crate::pipeline::{self, Featured, TrainIo};

/// Featurized splits with the vocabulary built from the training text.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Featured>,
    pub dev: Vec<Featured>,
    pub test: Vec<Featured>,
    /// One transcript per training manifest entry (before perturbation).
    pub train_text: Vec<String>,
    pub vocab: SubwordVocab,
}

impl Splits {
    /// Features for all three splits (training audio speed-perturbed) and a
    /// vocabulary of `cfg.bpe.units` trained on the training transcripts.
    pub fn load(train: &Manifest, dev: &Manifest, test: &Manifest, cfg: &RunConfig) -> anyhow::Result<Self> {
        let train_text: Vec<String> = train.entries.iter().map(|e| e.transcript.clone()).collect();
        let vocab = pipeline::train_vocab(&train_text, cfg.bpe.units)?;
        Ok(Self {
            train: pipeline::featurize(train, cfg, true)?,
            dev: pipeline::featurize(dev, cfg, false)?,
            test: pipeline::featurize(test, cfg, false)?,
            train_text,
            vocab,
        })
    }
}

fn fmt_wer(w: &WerReport) -> String {
    format!("{:.6}", w.wer())
}

/// Test WER of one training run per α, all with the same seed and
/// schedule. α = 1 has no trained decoder, so it is scored by greedy CTC
/// decoding; every other α uses the attention beam search without an LM.
pub fn alpha_sweep(
    data: &Splits,
    base: &RunConfig,
    alphas: &[f64],
    seed: u64,
    exec: &dyn Executor,
) -> anyhow::Result<Vec<(f64, WerReport)>> {
    ensure!(!alphas.is_empty(), "no alpha values given");
    for &a in alphas {
        ensure!((0.0..=1.0).contains(&a), "alpha {a} outside [0, 1]");
    }
    let mut out = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut cfg = base.clone();
        cfg.train.alpha = alpha;
        let train = pipeline::to_utterances(&data.train, &data.vocab);
        let dev = pipeline::to_utterances(&data.dev, &data.vocab);
        let (model, _) = pipeline::train_asr(&cfg, &data.vocab, train, dev, seed, exec, &TrainIo::default())?;
        let w = if alpha == 1.0 {
            pipeline::ctc_greedy_score(&model, &data.test, &data.vocab)?
        } else {
            let mut d = cfg.decode.to_decode();
            d.lm_weight = 0.0;
            pipeline::decode_and_score(&model, None, &data.test, &data.vocab, &d)?
        };
        log::info!("alpha {alpha}: WER {:.4}", w.wer());
        out.push((alpha, w));
    }
    Ok(out)
}

pub fn alpha_csv(rows: &[(f64, WerReport)]) -> String {
    let mut s = String::from("alpha,wer\n");
    for (a, w) in rows {
        let _ = writeln!(s, "{a},{}", fmt_wer(w));
    }
    s
}

/// Whether some interior α does at least as well as both endpoints.
pub fn interior_alpha_wins(rows: &[(f64, WerReport)]) -> Option<bool> {
    let at = |x: f64| rows.iter().find(|(a, _)| *a == x).map(|(_, w)| w.wer());
    let best_end = at(0.0)?.min(at(1.0)?);
    let interior: Vec<f64> = rows.iter().filter(|(a, _)| *a > 0.0 && *a < 1.0).map(|(_, w)| w.wer()).collect();
    if interior.is_empty() {
        return None;
    }
    Some(interior.iter().any(|&w| w <= best_end))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub depth: usize,
    pub ctc_bilstm: bool,
    pub wer_no_lm: WerReport,
    pub wer_lm: WerReport,
}

/// One model per (BiLSTM depth, CTC-branch flag) cell, each decoded without
/// and with LM fusion. The LM is trained once on the training transcripts.
/// The LM column uses `decode.lm_weight` (0.3 when it is set to zero).
pub fn ablation_grid(
    data: &Splits,
    base: &RunConfig,
    depths: &[usize],
    branches: &[bool],
    seed: u64,
    exec: &dyn Executor,
) -> anyhow::Result<Vec<AblationRow>> {
    ensure!(!depths.is_empty() && !branches.is_empty(), "empty ablation grid");
    ensure!(depths.iter().all(|&d| d >= 1), "encoder depth must be at least 1");
    let (lm, _) = pipeline::train_lm(&base.lm, &data.vocab, &data.train_text, seed)?;
    let mut rows = Vec::new();
    for &depth in depths {
        for &branch in branches {
            let mut cfg = base.clone();
            cfg.model.bilstm_layers = depth;
            cfg.model.ctc_bilstm = branch;
            let train = pipeline::to_utterances(&data.train, &data.vocab);
            let dev = pipeline::to_utterances(&data.dev, &data.vocab);
            let (model, _) = pipeline::train_asr(&cfg, &data.vocab, train, dev, seed, exec, &TrainIo::default())?;
            let mut d = cfg.decode.to_decode();
            d.lm_weight = 0.0;
            let wer_no_lm = pipeline::decode_and_score(&model, None, &data.test, &data.vocab, &d)?;
            d.lm_weight = if base.decode.lm_weight == 0.0 { 0.3 } else { base.decode.lm_weight };
            let wer_lm = pipeline::decode_and_score(&model, Some(&lm), &data.test, &data.vocab, &d)?;
            log::info!(
                "depth {depth} branch {}: WER {:.4} / {:.4} with LM",
                if branch { "on" } else { "off" },
                wer_no_lm.wer(),
                wer_lm.wer()
            );
            rows.push(AblationRow { depth, ctc_bilstm: branch, wer_no_lm, wer_lm });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("depth,branch,wer_no_lm,wer_lm\n");
    for r in rows {
        let b = if r.ctc_bilstm { "on" } else { "off" };
        let _ = writeln!(s, "{},{b},{},{}", r.depth, fmt_wer(&r.wer_no_lm), fmt_wer(&r.wer_lm));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(errors: usize) -> WerReport {
        WerReport { substitutions: errors, insertions: 0, deletions: 0, ref_words: 10 }
    }

    #[test]
    fn csv_shapes() {
        let a = alpha_csv(&[(0.0, rep(1)), (0.5, rep(0))]);
        assert_eq!(a, "alpha,wer\n0,0.100000\n0.5,0.000000\n");
        let r = AblationRow { depth: 2, ctc_bilstm: true, wer_no_lm: rep(2), wer_lm: rep(1) };
        assert_eq!(ablation_csv(&[r]), "depth,branch,wer_no_lm,wer_lm\n2,on,0.200000,0.100000\n");
    }

    #[test]
    fn interior_check() {
        assert_eq!(interior_alpha_wins(&[(0.0, rep(3)), (0.1, rep(2)), (1.0, rep(5))]), Some(true));
        assert_eq!(interior_alpha_wins(&[(0.0, rep(1)), (0.5, rep(2)), (1.0, rep(5))]), Some(false));
        assert_eq!(interior_alpha_wins(&[(0.0, rep(1)), (1.0, rep(5))]), None);
    }
}
