//! LSTM language model over subword units.
//!
//! Each sentence is scored as `sos y_1 .. y_n eos`: the model reads
//! `[sos, y..]` and predicts `[y.., eos]`. No state crosses sentences.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::{lstm_cell_step, lstm_sequence, LstmSpec, LstmState};
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::params::{Bound, ParamSpec, ParamStore};
use crate::rng::{self, streams};
use crate::search::SequenceScorer;
use crate::subword::{EOS, SOS};
use crate::tensor::Tensor;
use crate::training::{clip_global_norm, ClipOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub units: usize,
    pub layers: usize,
}

impl LmConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self { vocab_size, embed_dim: 32, units: 64, layers: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= EOS as usize || self.layers == 0 || self.units == 0 {
            return Err(invalid("lm needs the special units and at least one layer"));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = vec![ParamSpec::uniform("lm.embed", &[self.vocab_size, self.embed_dim])];
        let mut input = self.embed_dim;
        for l in 0..self.layers {
            specs.extend(LstmSpec::new(&format!("lm.lstm{l}"), input, self.units).param_specs());
            input = self.units;
        }
        specs.push(ParamSpec::uniform("lm.out.w", &[self.units, self.vocab_size]));
        specs.push(ParamSpec::uniform("lm.out.b", &[self.vocab_size]));
        specs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    pub cfg: LmConfig,
    pub params: ParamStore,
}

impl LanguageModel {
    pub fn init(cfg: LmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = ParamStore::init(&cfg.param_specs(), &mut rng::stream(seed, streams::LM_INIT));
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: LmConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        params.check(&cfg.param_specs())?;
        Ok(Self { cfg, params })
    }

    pub fn session(&self) -> LmSession {
        LmSession::new(self)
    }
}

fn check_ids(ids: &[u32], vocab: usize) -> Result<()> {
    match ids.iter().find(|&&u| u as usize >= vocab) {
        Some(&id) => Err(Error::InvalidUnit { id, size: vocab }),
        None => Ok(()),
    }
}

/// Sentence negative log-likelihood `[1]` (eos included) in `g`; returns it
/// with the number of predicted tokens.
pub fn sentence_nll_graph(g: &mut Graph, p: &Bound, cfg: &LmConfig, ids: &[u32]) -> Result<(Var, usize)> {
    check_ids(ids, cfg.vocab_size)?;
    let inputs: Vec<usize> = core::iter::once(SOS).chain(ids.iter().copied()).map(|u| u as usize).collect();
    let targets: Vec<usize> = ids.iter().copied().chain(core::iter::once(EOS)).map(|u| u as usize).collect();
    let mut x = g.gather_rows(p.get("lm.embed")?, &inputs)?;
    for l in 0..cfg.layers {
        let w = p.lstm(&format!("lm.lstm{l}"))?;
        x = lstm_sequence(g, x, &w, false)?;
    }
    let logits = g.matmul(x, p.get("lm.out.w")?)?;
    let logits = g.add_bias(logits, p.get("lm.out.b")?)?;
    let logp = g.log_softmax(logits);
    let flat: Vec<usize> = targets.iter().enumerate().map(|(s, &y)| s * cfg.vocab_size + y).collect();
    let picked = g.select(logp, &flat)?;
    let total = g.sum(picked);
    Ok((g.scale(total, -1.0), targets.len()))
}

/// Value snapshot of the LM recurrent state.
#[derive(Debug, Clone, PartialEq)]
pub struct LmState {
    pub hidden: Vec<Vec<f64>>,
    pub cell: Vec<Vec<f64>>,
}

/// Step-wise scorer over fixed LM parameters.
pub struct LmSession {
    g: Graph,
    p: Bound,
    cfg: LmConfig,
    mark: usize,
}

impl LmSession {
    pub fn new(lm: &LanguageModel) -> Self {
        let mut g = Graph::new();
        let p = lm.params.bind(&mut g, false);
        let mark = g.len();
        Self { g, p, cfg: lm.cfg, mark }
    }

    pub fn initial_state(&self) -> LmState {
        LmState {
            hidden: vec![vec![0.0; self.cfg.units]; self.cfg.layers],
            cell: vec![vec![0.0; self.cfg.units]; self.cfg.layers],
        }
    }

    /// Consumes `unit` and returns the next state with the log-distribution
    /// of the following unit.
    pub fn step(&mut self, state: &LmState, unit: u32) -> Result<(LmState, Vec<f64>)> {
        check_ids(&[unit], self.cfg.vocab_size)?;
        let out = self.step_inner(state, unit);
        self.g.truncate(self.mark);
        out
    }

    fn step_inner(&mut self, state: &LmState, unit: u32) -> Result<(LmState, Vec<f64>)> {
        let g = &mut self.g;
        let mut x = g.gather_rows(self.p.get("lm.embed")?, &[unit as usize])?;
        let mut next = LmState { hidden: Vec::new(), cell: Vec::new() };
        for l in 0..self.cfg.layers {
            let s = LstmState {
                h: g.constant(Tensor::row(state.hidden[l].clone())),
                c: g.constant(Tensor::row(state.cell[l].clone())),
            };
            let w = self.p.lstm(&format!("lm.lstm{l}"))?;
            let s = lstm_cell_step(g, x, s, &w)?;
            next.hidden.push(g.value(s.h).data().to_vec());
            next.cell.push(g.value(s.c).data().to_vec());
            x = s.h;
        }
        let logits = g.matmul(x, self.p.get("lm.out.w")?)?;
        let logits = g.add_bias(logits, self.p.get("lm.out.b")?)?;
        let logp = g.log_softmax(logits);
        Ok((next, g.value(logp).data().to_vec()))
    }
}

impl SequenceScorer for LmSession {
    type State = LmState;

    fn start(&mut self) -> Result<(LmState, Vec<f64>)> {
        let s0 = self.initial_state();
        self.step(&s0, SOS)
    }

    fn advance(&mut self, state: &LmState, token: u32) -> Result<(LmState, Vec<f64>)> {
        self.step(state, token)
    }
}

/// `exp` of the mean per-token negative log-likelihood over `corpus`, eos
/// tokens included.
pub fn perplexity(lm: &LanguageModel, corpus: &[Vec<u32>]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Empty("lm corpus"));
    }
    let mut total = 0.0;
    let mut tokens = 0;
    for ids in corpus {
        let mut g = Graph::new();
        let p = lm.params.bind(&mut g, false);
        let (nll, n) = sentence_nll_graph(&mut g, &p, &lm.cfg, ids)?;
        total += g.value(nll).item();
        tokens += n;
    }
    Ok(math::exp(total / tokens as f64))
}

/// SGD learning-rate schedule: `initial * decay^floor(epoch / every)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdSchedule {
    pub initial_lr: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub clip_norm: f64,
}

impl Default for SgdSchedule {
    fn default() -> Self {
        Self { initial_lr: 1.0, decay: 0.9, decay_every: 2, epochs: 20, clip_norm: 5.0 }
    }
}

impl SgdSchedule {
    /// Learning rate used during 0-based `epoch`.
    pub fn lr(&self, epoch: usize) -> f64 {
        self.initial_lr * math::powf(self.decay, (epoch / self.decay_every.max(1)) as f64)
    }
}

/// Per-epoch record of [`lm_train`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmEpoch {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-token loss over the epoch's updates.
    pub loss: f64,
}

/// Trains `lm` in place with per-sentence SGD updates, visiting sentences in
/// a seeded order each epoch.
pub fn lm_train(lm: &mut LanguageModel, corpus: &[Vec<u32>], schedule: &SgdSchedule, seed: u64) -> Result<Vec<LmEpoch>> {
    if corpus.is_empty() {
        return Err(Error::Empty("lm corpus"));
    }
    if !(schedule.clip_norm > 0.0) {
        return Err(invalid("clip_norm must be > 0"));
    }
    let mut log = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr(epoch);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        rng::shuffle(&mut rng::stream(seed, streams::LM_EPOCH_ORDER + ((epoch as u64) << 16)), &mut order);
        let mut total = 0.0;
        let mut tokens = 0;
        for i in order {
            let mut g = Graph::new();
            let p = lm.params.bind(&mut g, true);
            let (nll, n) = sentence_nll_graph(&mut g, &p, &lm.cfg, &corpus[i])?;
            total += g.value(nll).item();
            tokens += n;
            g.backward(nll)?;
            let mut grads = p.grads(&g);
            if let ClipOutcome::NonFinite = clip_global_norm(&mut grads, schedule.clip_norm) {
                log::warn!("lm step skipped: non-finite gradient");
                continue;
            }
            for (name, t) in lm.params.iter_mut() {
                let gr = grads.get(name)?;
                for (w, d) in t.data_mut().iter_mut().zip(gr.data()) {
                    *w -= lr * d;
                }
            }
        }
        log.push(LmEpoch { epoch, lr, loss: total / tokens as f64 });
    }
    Ok(log)
}
