//! End-to-end stages shared by the CLI and the experiment harnesses.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context};
use ctca_core::ctc::{greedy_collapse, BLANK};
use ctca_core::eval::{wer_text, WerReport};
use ctca_core::lm::{lm_train, LanguageModel, LmEpoch};
use ctca_core::model::Model;
use ctca_core::search::{beam_search, DecodeConfig, Hypothesis, NoScorer, SearchTokens};
use ctca_core::subword::{SubwordVocab, EOS, SOS};
use ctca_core::training::{Executor, MetricsRow, Trainer, Utterance};
use ctca_core::{ParamStore, Tensor};

use crate::checkpoint::{self, tensor_text, text_tensor};
use crate::config::{LmSection, RunConfig};
use crate::features::{read_wav, speed_perturb, Filterbank, Waveform};
use crate::formats::{self, Manifest, Source};
use crate::synth::{self, SynthConfig};

/// Features of one (possibly speed-perturbed) utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Featured {
    pub id: String,
    pub transcript: String,
    pub features: Tensor,
}

/// Generator settings for `synth` entries: `# synth` header values over
/// `base`, plus the corpus seed.
pub fn synth_settings(m: &Manifest, base: &SynthConfig) -> anyhow::Result<(SynthConfig, u64)> {
    let mut cfg = *base;
    let mut seed = None;
    for (k, v) in &m.synth {
        let bad = || format!("synth setting {k}={v}");
        match k.as_str() {
            "seed" => seed = Some(v.parse().with_context(bad)?),
            "vocab" => cfg.vocab = v.parse().with_context(bad)?,
            "snr_db" => cfg.snr_db = v.parse().with_context(bad)?,
            "sample_rate" => cfg.sample_rate = v.parse().with_context(bad)?,
            _ => {}
        }
    }
    let has_synth = m.entries.iter().any(|e| e.source == Source::Synth);
    ensure!(!has_synth || seed.is_some(), "manifest has synth entries but no '# synth seed=...' header");
    Ok((cfg, seed.unwrap_or(0)))
}

/// Manifest lines for one split of a synthetic corpus.
pub fn synth_manifest(cfg: &SynthConfig, seed: u64, utts: &[synth::SynthUtterance]) -> Manifest {
    Manifest {
        entries: utts
            .iter()
            .map(|u| formats::ManifestEntry { id: u.id.clone(), source: Source::Synth, transcript: u.transcript.clone() })
            .collect(),
        synth: vec![
            ("seed".into(), seed.to_string()),
            ("vocab".into(), cfg.vocab.to_string()),
            ("snr_db".into(), cfg.snr_db.to_string()),
            ("sample_rate".into(), cfg.sample_rate.to_string()),
        ],
    }
}

pub fn load_audio(m: &Manifest, cfg: &RunConfig) -> anyhow::Result<Vec<(String, String, Waveform)>> {
    let (scfg, seed) = synth_settings(m, &cfg.synth)?;
    m.entries
        .iter()
        .map(|e| {
            let w = match &e.source {
                Source::Synth => synth::render(&scfg, seed, &e.id, &e.transcript),
                Source::Wav(p) => read_wav(p),
            }
            .with_context(|| format!("utterance {}", e.id))?;
            Ok((e.id.clone(), e.transcript.clone(), w))
        })
        .collect()
}

fn speed_suffix(factor: f64) -> String {
    format!("-sp{factor}")
}

/// Log-mel features for every entry. With `perturb`, each configured speed
/// factor yields one copy; factor 1 keeps the original id.
pub fn featurize(m: &Manifest, cfg: &RunConfig, perturb: bool) -> anyhow::Result<Vec<Featured>> {
    let audio = load_audio(m, cfg)?;
    let factors: Vec<f64> = if perturb && !cfg.features.speed_factors.is_empty() {
        cfg.features.speed_factors.clone()
    } else {
        vec![1.0]
    };
    let mut banks: Vec<(u32, Filterbank)> = Vec::new();
    let mut out = Vec::with_capacity(audio.len() * factors.len());
    for &f in &factors {
        for (id, tr, w) in &audio {
            let bank = match banks.iter().position(|(r, _)| *r == w.sample_rate) {
                Some(i) => &banks[i].1,
                None => {
                    banks.push((w.sample_rate, Filterbank::new(cfg.features.fbank, w.sample_rate)?));
                    &banks.last().expect("just pushed").1
                }
            };
            let wave = speed_perturb(w, f)?;
            let features = bank.compute(&wave).with_context(|| format!("utterance {id}"))?;
            let id = if f == 1.0 { id.clone() } else { format!("{id}{}", speed_suffix(f)) };
            out.push(Featured { id, transcript: tr.clone(), features });
        }
    }
    Ok(out)
}

/// Trains a vocabulary whose size approaches `units` (specials and the base
/// alphabet included).
pub fn train_vocab<S: AsRef<str>>(transcripts: &[S], units: usize) -> anyhow::Result<SubwordVocab> {
    let base = SubwordVocab::train(transcripts, 0)?.len();
    if units < base {
        log::warn!("bpe.units={units} is below the base alphabet size {base}; using no merges");
    }
    Ok(SubwordVocab::train(transcripts, units.saturating_sub(base))?)
}

pub fn to_utterances(feats: &[Featured], vocab: &SubwordVocab) -> Vec<Utterance> {
    feats
        .iter()
        .map(|f| Utterance { id: f.id.clone(), features: f.features.clone(), labels: vocab.encode(&f.transcript) })
        .collect()
}

// ---- ASR training ---------------------------------------------------------

/// Where training writes its outputs.
#[derive(Debug, Clone, Default)]
pub struct TrainIo {
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    /// Checkpoint to continue from (written by an earlier run with the same
    /// data, config and seed).
    pub resume: Option<PathBuf>,
}

fn metrics_text(rows: &[String]) -> String {
    let mut s = format!("{}\n", formats::METRICS_HEADER);
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

/// Trainer state plus everything needed to decode with it.
pub fn checkpoint_tensors(t: &Trainer, cfg: &RunConfig, vocab: &SubwordVocab, rows: &[String]) -> ParamStore {
    let mut s = t.state_tensors();
    s.insert("meta.config", text_tensor(&cfg.to_toml()));
    s.insert("meta.vocab", text_tensor(&formats::render_vocab(vocab)));
    s.insert("meta.seed", Tensor::scalar(t.seed as f64));
    s.insert("meta.metrics", text_tensor(&rows.join("\n")));
    s
}

/// Model, run config and vocabulary from a training checkpoint.
pub fn load_model(path: &Path) -> anyhow::Result<(Model, RunConfig, SubwordVocab)> {
    let state = checkpoint::load(path)?;
    let (model, cfg, vocab) = model_from_state(&state).with_context(|| format!("checkpoint {}", path.display()))?;
    Ok((model, cfg, vocab))
}

fn model_from_state(state: &ParamStore) -> anyhow::Result<(Model, RunConfig, SubwordVocab)> {
    let cfg = RunConfig::load(Some(&tensor_text(state.get("meta.config")?)?), &[])?;
    let vocab = formats::parse_vocab(&tensor_text(state.get("meta.vocab")?)?)?;
    let mcfg = cfg.model.to_model(vocab.len(), cfg.features.fbank.mel_bins);
    let mut params = ParamStore::new();
    for spec in mcfg.param_specs() {
        params.insert(&spec.name, state.get(&spec.name)?.clone());
    }
    Ok((Model::from_params(mcfg, params)?, cfg, vocab))
}

/// Trains the hybrid model, logging metrics and checkpointing at every
/// validation boundary and at the end.
pub fn train_asr(
    cfg: &RunConfig,
    vocab: &SubwordVocab,
    train: Vec<Utterance>,
    val: Vec<Utterance>,
    seed: u64,
    exec: &dyn Executor,
    io: &TrainIo,
) -> anyhow::Result<(Model, Vec<MetricsRow>)> {
    let mcfg = cfg.model.to_model(vocab.len(), cfg.features.fbank.mel_bins);
    let model = Model::init(mcfg, seed)?;
    let mut trainer = Trainer::new(model, cfg.train.to_train(), seed, train, val)?;
    let mut rows: Vec<String> = Vec::new();
    let mut last_measured = None;
    if let Some(path) = &io.resume {
        let state = checkpoint::load(path)?;
        let saved = RunConfig::load(Some(&tensor_text(state.get("meta.config")?)?), &[])?;
        ensure!(saved.model == cfg.model, "resume checkpoint was trained with a different model config");
        let saved_seed = state.get("meta.seed")?.item() as u64;
        ensure!(saved_seed == seed, "resume checkpoint used seed {saved_seed}, this run uses {seed}");
        trainer.restore(&state)?;
        let text = tensor_text(state.get("meta.metrics")?)?;
        rows.extend(text.lines().filter(|l| !l.is_empty()).map(str::to_string));
        last_measured = rows.last().and_then(|r| r.split(',').next()).and_then(|i| i.parse::<usize>().ok());
        log::info!("resumed at iteration {}", trainer.iteration);
    }
    let mut history = Vec::new();
    let start = Instant::now();
    let limit = cfg.train.time_limit_s;
    let save = |t: &Trainer, rows: &[String]| -> anyhow::Result<()> {
        if let Some(p) = &io.checkpoint {
            checkpoint::save(p, &checkpoint_tensors(t, cfg, vocab, rows))?;
        }
        if let Some(p) = &io.metrics {
            checkpoint::write_atomic(p, metrics_text(rows).as_bytes())?;
        }
        Ok(())
    };
    while trainer.iteration < trainer.cfg.iterations {
        if limit > 0.0 && start.elapsed().as_secs_f64() >= limit {
            log::warn!("time limit of {limit}s reached at iteration {}", trainer.iteration);
            break;
        }
        let r = trainer.step(exec)?;
        if !r.applied {
            log::debug!("iteration {}: no update applied", r.iteration);
        }
        if let Some(m) = r.metrics {
            log::info!(
                "iter {} loss {:.4} train_acc {:.3} val_acc {:.3} eps {:e}",
                m.iteration,
                m.train_loss,
                m.train_acc,
                m.val_acc,
                m.epsilon
            );
            rows.push(formats::metrics_line(&m));
            last_measured = Some(m.iteration);
            history.push(m);
            save(&trainer, &rows)?;
        }
    }
    if last_measured != Some(trainer.iteration) {
        let m = trainer.measure()?;
        rows.push(formats::metrics_line(&m));
        history.push(m);
    }
    save(&trainer, &rows)?;
    Ok((trainer.model, history))
}

// ---- language model -------------------------------------------------------

pub fn lm_corpus(transcripts: &[String], vocab: &SubwordVocab) -> Vec<Vec<u32>> {
    transcripts.iter().map(|t| vocab.encode(t)).filter(|ids| !ids.is_empty()).collect()
}

pub fn train_lm(
    section: &LmSection,
    vocab: &SubwordVocab,
    transcripts: &[String],
    seed: u64,
) -> anyhow::Result<(LanguageModel, Vec<LmEpoch>)> {
    let corpus = lm_corpus(transcripts, vocab);
    ensure!(!corpus.is_empty(), "LM corpus is empty");
    let mut lm = LanguageModel::init(section.to_lm(vocab.len()), seed)?;
    let log = lm_train(&mut lm, &corpus, &section.schedule(), seed)?;
    Ok((lm, log))
}

pub fn save_lm(path: &Path, lm: &LanguageModel, section: &LmSection, vocab: &SubwordVocab) -> anyhow::Result<()> {
    let mut s = lm.params.clone();
    let text = toml::to_string(section).context("serializing LM config")?;
    s.insert("meta.lm_config", text_tensor(&text));
    s.insert("meta.vocab", text_tensor(&formats::render_vocab(vocab)));
    checkpoint::save(path, &s)
}

pub fn load_lm(path: &Path) -> anyhow::Result<(LanguageModel, SubwordVocab)> {
    let state = checkpoint::load(path)?;
    let section: LmSection = toml::from_str(&tensor_text(state.get("meta.lm_config")?)?)?;
    let vocab = formats::parse_vocab(&tensor_text(state.get("meta.vocab")?)?)?;
    let cfg = section.to_lm(vocab.len());
    let mut params = ParamStore::new();
    for spec in cfg.param_specs() {
        params.insert(&spec.name, state.get(&spec.name)?.clone());
    }
    Ok((LanguageModel::from_params(cfg, params)?, vocab))
}

// ---- decoding -------------------------------------------------------------

pub fn search_tokens(vocab: &SubwordVocab) -> SearchTokens {
    SearchTokens { vocab_size: vocab.len(), eos: EOS, skip: vec![BLANK, SOS] }
}

/// N-best list for one utterance. `ctc_weight > 0` fuses CTC prefix scores;
/// `lm` is used when given and `lm_weight != 0`.
pub fn decode_features(
    model: &Model,
    lm: Option<&LanguageModel>,
    features: &Tensor,
    tokens: &SearchTokens,
    dcfg: &DecodeConfig,
) -> anyhow::Result<Vec<Hypothesis>> {
    let h = model.encode(features)?;
    let frames = h.h.rows();
    let mut dec = model.decoder_session(&h)?;
    let post = if dcfg.ctc_weight > 0.0 { Some(model.ctc_posteriors(&h)?) } else { None };
    let out = match lm {
        Some(lm) if dcfg.lm_weight != 0.0 => {
            let mut s = lm.session();
            beam_search(&mut dec, Some(&mut s), post.as_ref(), frames, tokens, dcfg)?
        }
        _ => beam_search(&mut dec, None::<&mut NoScorer>, post.as_ref(), frames, tokens, dcfg)?,
    };
    Ok(out)
}

/// Best path of the CTC branch alone.
pub fn ctc_greedy_text(model: &Model, features: &Tensor, vocab: &SubwordVocab) -> anyhow::Result<String> {
    let h = model.encode(features)?;
    let q = model.ctc_posteriors(&h)?;
    Ok(vocab.decode(&greedy_collapse(&q))?)
}

pub fn hypothesis_text(h: &Hypothesis, vocab: &SubwordVocab) -> anyhow::Result<String> {
    Ok(vocab.decode(h.units(EOS))?)
}

/// Decodes a set and scores it against its transcripts.
pub fn decode_and_score(
    model: &Model,
    lm: Option<&LanguageModel>,
    feats: &[Featured],
    vocab: &SubwordVocab,
    dcfg: &DecodeConfig,
) -> anyhow::Result<WerReport> {
    let tokens = search_tokens(vocab);
    let mut total = WerReport::default();
    for f in feats {
        let hyps = decode_features(model, lm, &f.features, &tokens, dcfg)?;
        let text = match hyps.first() {
            Some(h) => hypothesis_text(h, vocab)?,
            None => String::new(),
        };
        total.accumulate(&wer_text(&f.transcript, &text)?);
    }
    Ok(total)
}

pub fn ctc_greedy_score(model: &Model, feats: &[Featured], vocab: &SubwordVocab) -> anyhow::Result<WerReport> {
    let mut total = WerReport::default();
    for f in feats {
        let text = ctc_greedy_text(model, &f.features, vocab)?;
        total.accumulate(&wer_text(&f.transcript, &text)?);
    }
    Ok(total)
}

/// Corpus WER of `hyps` (id, text) against a manifest's transcripts.
pub fn score_hypotheses(m: &Manifest, hyps: &[(String, String)]) -> anyhow::Result<WerReport> {
    let mut total = WerReport::default();
    for e in &m.entries {
        let hyp = match hyps.iter().find(|(id, _)| *id == e.id) {
            Some((_, t)) => t.as_str(),
            None => bail!("no hypothesis for utterance {}", e.id),
        };
        total.accumulate(&wer_text(&e.transcript, hyp)?);
    }
    Ok(total)
}
