//! Attention branch: location-aware attention over the encoder output and a
//! two-layer LSTM decoder.
//!
//! At output step `s`, with decoder state `d_{s-1}` and previous attention
//! weights `eps_{s-1}`:
//!
//! ```text
//! f_s     = F * eps_{s-1}                                  (1-d conv, same padding)
//! e_{s,t} = w^T tanh(Wd d_{s-1} + Wh h_t + Wf f_{s,t} + b)
//! eps_s   = softmax(e_s)                 (WeightMode::Softmax)
//!         = sigmoid(e_s) / sum sigmoid(e_s)   (WeightMode::Smoothed)
//! a_s     = sum_t eps_{s,t} h_t
//! d_s     = LSTM(d_{s-1}, [embed(y_{s-1}), a_s])
//! p(y_s)  = softmax(Wo [d_s, a_s] + bo)
//! ```
//!
//! Sigmoid smoothing keeps every frame's weight bounded away from zero
//! relative to the peak, which flattens the distribution compared with the
//! softmax.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::{lstm_cell_step, EncodedSequence, LstmSpec, LstmState};
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::params::{Bound, ParamSpec, ParamStore};
use crate::search::SequenceScorer;
use crate::tensor::Tensor;

/// How energies become attention weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    Softmax,
    Smoothed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    /// Width of the encoder output rows.
    pub encoder_dim: usize,
    pub att_dim: usize,
    pub filters: usize,
    pub filter_width: usize,
    pub embed_dim: usize,
    pub dec_units: usize,
    pub dec_layers: usize,
    pub vocab_size: usize,
    pub sos: u32,
    pub eos: u32,
    pub mode: WeightMode,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filter_width % 2 == 0 {
            return Err(invalid("location filter width must be odd"));
        }
        if self.dec_layers == 0 || self.att_dim == 0 || self.filters == 0 {
            return Err(invalid("attention dimensions must be positive"));
        }
        if self.sos as usize >= self.vocab_size || self.eos as usize >= self.vocab_size {
            return Err(invalid("sos/eos outside the vocabulary"));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let a = self.att_dim;
        let mut specs = vec![
            ParamSpec::uniform("att.w", &[a, 1]),
            ParamSpec::uniform("att.wd", &[self.dec_units, a]),
            ParamSpec::uniform("att.wh", &[self.encoder_dim, a]),
            ParamSpec::uniform("att.wf", &[self.filters, a]),
            ParamSpec::uniform("att.b", &[a]),
            ParamSpec::uniform("att.filters", &[self.filter_width, 1, self.filters]),
            ParamSpec::uniform("dec.embed", &[self.vocab_size, self.embed_dim]),
        ];
        let mut input = self.embed_dim + self.encoder_dim;
        for l in 0..self.dec_layers {
            specs.extend(LstmSpec::new(&format!("dec.lstm{l}"), input, self.dec_units).param_specs());
            input = self.dec_units;
        }
        specs.push(ParamSpec::uniform(
            "dec.out.w",
            &[self.dec_units + self.encoder_dim, self.vocab_size],
        ));
        specs.push(ParamSpec::uniform("dec.out.b", &[self.vocab_size]));
        specs
    }
}

/// Encoder output bound into a graph, with its attention projection
/// `h Wh` computed once.
#[derive(Debug, Clone, Copy)]
pub struct EncoderContext {
    pub h: Var,
    pub hw: Var,
    pub frames: usize,
}

impl EncoderContext {
    pub fn new(g: &mut Graph, h: Var, p: &Bound) -> Result<Self> {
        let frames = g.value(h).dims()[0];
        let hw = g.matmul(h, p.get("att.wh")?)?;
        Ok(Self { h, hw, frames })
    }
}

/// Decoder recurrent state plus the previous attention weights (`[1, T']`).
#[derive(Debug, Clone)]
pub struct DecoderVars {
    pub layers: Vec<LstmState>,
    pub prev_weights: Var,
}

impl DecoderVars {
    /// Zero LSTM states and uniform previous weights.
    pub fn initial(g: &mut Graph, cfg: &AttentionConfig, frames: usize) -> Self {
        let layers = (0..cfg.dec_layers)
            .map(|_| LstmState::zeros(g, cfg.dec_units))
            .collect();
        let prev_weights = g.constant(Tensor::full(&[1, frames], 1.0 / frames as f64));
        Self { layers, prev_weights }
    }
}

/// Location-aware energies `e_s` over the encoder frames, `[1, T']`.
pub fn energies(g: &mut Graph, state: &DecoderVars, enc: &EncoderContext, p: &Bound) -> Result<Var> {
    let d = state.layers.last().ok_or(Error::Empty("decoder layers"))?.h;
    let wd = g.matmul(d, p.get("att.wd")?)?;
    let prev = g.reshape(state.prev_weights, &[enc.frames, 1])?;
    let loc = g.conv1d(prev, p.get("att.filters")?)?;
    let loc = g.matmul(loc, p.get("att.wf")?)?;
    let pre = g.add(enc.hw, loc)?;
    let pre = g.add_bias(pre, wd)?;
    let pre = g.add_bias(pre, p.get("att.b")?)?;
    let act = g.tanh(pre);
    let e = g.matmul(act, p.get("att.w")?)?;
    g.reshape(e, &[1, enc.frames])
}

/// Attention weights from energies.
pub fn weights(g: &mut Graph, e: Var, mode: WeightMode) -> Var {
    match mode {
        WeightMode::Softmax => g.softmax(e),
        WeightMode::Smoothed => {
            let s = g.sigmoid(e);
            g.normalize(s)
        }
    }
}

/// Context vector `a_s = eps_s h`, `[1, encoder_dim]`.
pub fn context(g: &mut Graph, eps: Var, h: Var) -> Result<Var> {
    g.matmul(eps, h)
}

/// Advances the decoder LSTM stack on `(y_prev, a_s)` and returns the new
/// layer states with the output log-distribution `[1, V]`.
pub fn decoder_step(
    g: &mut Graph,
    layers: &[LstmState],
    y_prev: u32,
    a_s: Var,
    p: &Bound,
) -> Result<(Vec<LstmState>, Var)> {
    let embed = p.get("dec.embed")?;
    let vocab = g.value(embed).dims()[0];
    if y_prev as usize >= vocab {
        return Err(Error::InvalidUnit { id: y_prev, size: vocab });
    }
    let emb = g.gather_rows(embed, &[y_prev as usize])?;
    let mut x = g.concat_cols(&[emb, a_s])?;
    let mut next = Vec::with_capacity(layers.len());
    for (l, &state) in layers.iter().enumerate() {
        let w = p.lstm(&format!("dec.lstm{l}"))?;
        let s = lstm_cell_step(g, x, state, &w)?;
        x = s.h;
        next.push(s);
    }
    let features = g.concat_cols(&[x, a_s])?;
    let logits = g.matmul(features, p.get("dec.out.w")?)?;
    let logits = g.add_bias(logits, p.get("dec.out.b")?)?;
    Ok((next, g.log_softmax(logits)))
}

/// Attention followed by one decoder step.
pub fn attend_and_step(
    g: &mut Graph,
    state: &DecoderVars,
    y_prev: u32,
    enc: &EncoderContext,
    p: &Bound,
    mode: WeightMode,
) -> Result<(DecoderVars, Var)> {
    let e = energies(g, state, enc, p)?;
    let eps = weights(g, e, mode);
    let a = context(g, eps, enc.h)?;
    let (layers, logp) = decoder_step(g, &state.layers, y_prev, a, p)?;
    Ok((DecoderVars { layers, prev_weights: eps }, logp))
}

/// Teacher-forced attention loss.
#[derive(Debug, Clone, Copy)]
pub struct AttentionLoss {
    /// `-sum_s ln p(target_s)`, `[1]`.
    pub nll: Var,
    /// Output steps whose argmax equals the target (eos step included).
    pub correct: usize,
    pub steps: usize,
}

/// Teacher-forced negative log-likelihood of `labels` (no specials): inputs
/// are `[sos, labels..]`, targets are `[labels.., eos]`.
pub fn attention_nll_graph(
    g: &mut Graph,
    enc: &EncoderContext,
    labels: &[u32],
    p: &Bound,
    cfg: &AttentionConfig,
) -> Result<AttentionLoss> {
    let mut state = DecoderVars::initial(g, cfg, enc.frames);
    let mut rows = Vec::with_capacity(labels.len() + 1);
    let mut y_prev = cfg.sos;
    let targets: Vec<u32> = labels.iter().copied().chain(core::iter::once(cfg.eos)).collect();
    let mut correct = 0;
    for &target in &targets {
        if target as usize >= cfg.vocab_size {
            return Err(Error::InvalidUnit { id: target, size: cfg.vocab_size });
        }
        let (next, logp) = attend_and_step(g, &state, y_prev, enc, p, cfg.mode)?;
        if math::argmax(g.value(logp).data()) == target as usize {
            correct += 1;
        }
        rows.push(logp);
        state = next;
        y_prev = target;
    }
    let all = g.concat_rows(&rows)?;
    let idx: Vec<usize> = targets
        .iter()
        .enumerate()
        .map(|(s, &y)| s * cfg.vocab_size + y as usize)
        .collect();
    let picked = g.select(all, &idx)?;
    let total = g.sum(picked);
    Ok(AttentionLoss {
        nll: g.scale(total, -1.0),
        correct,
        steps: targets.len(),
    })
}

/// Teacher-forced `L_att` for fixed parameters. The target sequence is
/// `labels` followed by eos and must be non-empty after that, so only an
/// out-of-range id is an error here.
pub fn attention_nll(
    h: &EncodedSequence,
    labels: &[u32],
    params: &ParamStore,
    cfg: &AttentionConfig,
) -> Result<f64> {
    cfg.validate()?;
    params.check_subset(&cfg.param_specs())?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let hv = g.constant(h.h.clone());
    let enc = EncoderContext::new(&mut g, hv, &p)?;
    let loss = attention_nll_graph(&mut g, &enc, labels, &p, cfg)?;
    Ok(g.value(loss.nll).item())
}

/// Attention weights computed directly from the defining formulas.
pub fn attention_weights(e: &[f64], mode: WeightMode) -> Vec<f64> {
    match mode {
        WeightMode::Softmax => {
            let mut out = vec![0.0; e.len()];
            math::softmax_into(e, &mut out);
            out
        }
        WeightMode::Smoothed => {
            let s: Vec<f64> = e.iter().map(|&v| math::sigmoid(v)).collect();
            let total: f64 = s.iter().sum();
            s.into_iter().map(|v| v / total).collect()
        }
    }
}

/// Value snapshot of the decoder between search steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub hidden: Vec<Vec<f64>>,
    pub cell: Vec<Vec<f64>>,
    pub prev_weights: Vec<f64>,
    pub prev_output: u32,
}

/// Step-wise attention decoder over one utterance, for search.
pub struct DecoderSession {
    g: Graph,
    p: Bound,
    enc: EncoderContext,
    cfg: AttentionConfig,
    mark: usize,
}

impl DecoderSession {
    pub fn new(h: &EncodedSequence, params: &ParamStore, cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        params.check_subset(&cfg.param_specs())?;
        if h.frames() == 0 {
            return Err(Error::Empty("encoder output"));
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let hv = g.constant(h.h.clone());
        let enc = EncoderContext::new(&mut g, hv, &p)?;
        let mark = g.len();
        Ok(Self { g, p, enc, cfg: *cfg, mark })
    }

    fn run(&mut self, state: &DecoderState, y_prev: u32) -> Result<(DecoderState, Vec<f64>)> {
        let g = &mut self.g;
        let layers = state
            .hidden
            .iter()
            .zip(&state.cell)
            .map(|(h, c)| LstmState {
                h: g.constant(Tensor::row(h.clone())),
                c: g.constant(Tensor::row(c.clone())),
            })
            .collect();
        let prev_weights = g.constant(Tensor::row(state.prev_weights.clone()));
        let vars = DecoderVars { layers, prev_weights };
        let (next, logp) = attend_and_step(g, &vars, y_prev, &self.enc, &self.p, self.cfg.mode)?;
        let out = DecoderState {
            hidden: next.layers.iter().map(|s| g.value(s.h).data().to_vec()).collect(),
            cell: next.layers.iter().map(|s| g.value(s.c).data().to_vec()).collect(),
            prev_weights: g.value(next.prev_weights).data().to_vec(),
            prev_output: y_prev,
        };
        let logp = g.value(logp).data().to_vec();
        g.truncate(self.mark);
        Ok((out, logp))
    }

    /// Zero LSTM state and uniform previous weights.
    pub fn initial_state(&self) -> DecoderState {
        let d = self.cfg.dec_units;
        DecoderState {
            hidden: vec![vec![0.0; d]; self.cfg.dec_layers],
            cell: vec![vec![0.0; d]; self.cfg.dec_layers],
            prev_weights: vec![1.0 / self.enc.frames as f64; self.enc.frames],
            prev_output: self.cfg.sos,
        }
    }

    pub fn frames(&self) -> usize {
        self.enc.frames
    }
}

impl SequenceScorer for DecoderSession {
    type State = DecoderState;

    fn start(&mut self) -> Result<(DecoderState, Vec<f64>)> {
        let s0 = self.initial_state();
        self.run(&s0, self.cfg.sos)
    }

    fn advance(&mut self, state: &DecoderState, token: u32) -> Result<(DecoderState, Vec<f64>)> {
        self.run(state, token)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    pub(crate) fn tiny_cfg(mode: WeightMode) -> AttentionConfig {
        AttentionConfig {
            encoder_dim: 4,
            att_dim: 3,
            filters: 2,
            filter_width: 3,
            embed_dim: 2,
            dec_units: 3,
            dec_layers: 2,
            vocab_size: 5,
            sos: 1,
            eos: 2,
            mode,
        }
    }

    fn encoded(frames: usize) -> EncodedSequence {
        let data = (0..frames * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        EncodedSequence { h: Tensor::new(vec![frames, 4], data).unwrap() }
    }

    #[test]
    fn softmax_and_smoothed_examples() {
        let ln3 = math::ln(3.0);
        let s = attention_weights(&[0.0, ln3], WeightMode::Softmax);
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
        let m = attention_weights(&[0.0, ln3], WeightMode::Smoothed);
        assert!((m[0] - 0.4).abs() < 1e-15 && (m[1] - 0.6).abs() < 1e-15);
        for mode in [WeightMode::Softmax, WeightMode::Smoothed] {
            let u = attention_weights(&[1.7; 4], mode);
            assert!(u.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn graph_weights_match_direct_formulas() {
        let e = [0.3, -1.1, 2.4, 0.0];
        for mode in [WeightMode::Softmax, WeightMode::Smoothed] {
            let mut g = Graph::new();
            let ev = g.constant(Tensor::row(e.to_vec()));
            let w = weights(&mut g, ev, mode);
            let direct = attention_weights(&e, mode);
            for (a, b) in g.value(w).data().iter().zip(&direct) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_projection_gives_zero_energies() {
        let cfg = tiny_cfg(WeightMode::Smoothed);
        let mut params = ParamStore::init(&cfg.param_specs(), &mut rng::stream(3, 1));
        params.insert("att.w", Tensor::zeros(&[3, 1]));
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let h = g.constant(encoded(4).h);
        let enc = EncoderContext::new(&mut g, h, &p).unwrap();
        let st = DecoderVars::initial(&mut g, &cfg, 4);
        let e = energies(&mut g, &st, &enc, &p).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_only_energies_are_constant() {
        let cfg = tiny_cfg(WeightMode::Softmax);
        let random = ParamStore::init(&cfg.param_specs(), &mut rng::stream(4, 1));
        let mut params = ParamStore::zeros(&cfg.param_specs());
        params.insert("att.b", random.get("att.b").unwrap().clone());
        params.insert("att.w", random.get("att.w").unwrap().clone());
        let w = random.get("att.w").unwrap().data().to_vec();
        let b = random.get("att.b").unwrap().data().to_vec();
        let expect: f64 = w.iter().zip(&b).map(|(w, b)| w * math::tanh(*b)).sum();
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let h = g.constant(encoded(5).h);
        let enc = EncoderContext::new(&mut g, h, &p).unwrap();
        let st = DecoderVars::initial(&mut g, &cfg, 5);
        let e = energies(&mut g, &st, &enc, &p).unwrap();
        for &v in g.value(e).data() {
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn context_selects_and_averages() {
        let h = encoded(3).h;
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let onehot = g.constant(Tensor::row(vec![0.0, 1.0, 0.0]));
        let a = context(&mut g, onehot, hv).unwrap();
        assert_eq!(g.value(a).data(), h.row_slice(1));
        let uniform = g.constant(Tensor::row(vec![1.0 / 3.0; 3]));
        let m = context(&mut g, uniform, hv).unwrap();
        for c in 0..4 {
            let mean = (0..3).map(|t| h.row_slice(t)[c]).sum::<f64>() / 3.0;
            assert!((g.value(m).data()[c] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_output_layer_is_uniform() {
        let cfg = tiny_cfg(WeightMode::Smoothed);
        let mut params = ParamStore::init(&cfg.param_specs(), &mut rng::stream(5, 1));
        params.insert("dec.out.w", Tensor::zeros(&[7, 5]));
        params.insert("dec.out.b", Tensor::zeros(&[5]));
        let mut session = DecoderSession::new(&encoded(4), &params, &cfg).unwrap();
        let (_, logp) = session.start().unwrap();
        for &v in &logp {
            assert!((v - math::ln(0.2)).abs() < 1e-14);
        }
        // the loss is then (L + 1) ln V
        let nll = attention_nll(&encoded(4), &[3, 4, 3], &params, &cfg).unwrap();
        assert!((nll - 4.0 * math::ln(5.0)).abs() < 1e-12);
    }

    #[test]
    fn invalid_previous_unit_is_rejected() {
        let cfg = tiny_cfg(WeightMode::Smoothed);
        let params = ParamStore::init(&cfg.param_specs(), &mut rng::stream(5, 1));
        let mut session = DecoderSession::new(&encoded(4), &params, &cfg).unwrap();
        let (s, _) = session.start().unwrap();
        assert!(matches!(session.advance(&s, 9), Err(Error::InvalidUnit { id: 9, .. })));
    }

    #[test]
    fn nll_matches_step_by_step_recomputation() {
        let cfg = tiny_cfg(WeightMode::Smoothed);
        let params = ParamStore::init(&cfg.param_specs(), &mut rng::stream(6, 1));
        let h = encoded(4);
        let labels = [3u32, 4, 4];
        let nll = attention_nll(&h, &labels, &params, &cfg).unwrap();
        let mut session = DecoderSession::new(&h, &params, &cfg).unwrap();
        let (mut st, mut logp) = session.start().unwrap();
        let mut total = 0.0;
        for &y in labels.iter().chain([cfg.eos].iter()) {
            total -= logp[y as usize];
            let (s, l) = session.advance(&st, y).unwrap();
            st = s;
            logp = l;
        }
        assert!((nll - total).abs() < 1e-12);
    }
}
