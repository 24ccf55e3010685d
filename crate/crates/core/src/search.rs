//! Step-synchronous beam search with shallow LM fusion and CTC prefix
//! scoring.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::ctc::CtcPosteriors;
use crate::error::{invalid, Error, Result};
use crate::math;

/// A left-to-right scorer: after consuming a prefix it yields a
/// log-distribution over the next unit.
pub trait SequenceScorer {
    type State: Clone;

    /// State after the start symbol, with the distribution of the first unit.
    fn start(&mut self) -> Result<(Self::State, Vec<f64>)>;

    /// Consumes `token` from `state`.
    fn advance(&mut self, state: &Self::State, token: u32) -> Result<(Self::State, Vec<f64>)>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    pub lm_weight: f64,
    pub ctc_weight: f64,
    /// Output length cap as a multiple of the encoder frame count.
    pub max_len_ratio: f64,
    /// Additive bonus per output id (eos included) in the final ranking.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 20,
            lm_weight: 0.3,
            ctc_weight: 0.0,
            max_len_ratio: 1.0,
            length_penalty: 0.6,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(invalid("beam must be at least 1"));
        }
        if !(self.lm_weight >= 0.0) {
            return Err(invalid("lm_weight must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.ctc_weight) {
            return Err(invalid("ctc_weight must be in [0, 1)"));
        }
        if !(self.max_len_ratio > 0.0) || !self.length_penalty.is_finite() {
            return Err(invalid("max_len_ratio must be > 0 and length_penalty finite"));
        }
        Ok(())
    }

    /// Maximum number of output ids (eos included) for `frames` encoder frames.
    pub fn max_len(&self, frames: usize) -> usize {
        ((self.max_len_ratio * frames as f64) as usize).max(1)
    }
}

/// Which units may be emitted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchTokens {
    pub vocab_size: usize,
    pub eos: u32,
    /// Never expanded (blank and sos in a normal vocabulary).
    pub skip: Vec<u32>,
}

/// A scored output sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted ids; ends with eos when `finished`.
    pub ids: Vec<u32>,
    pub att_logp: f64,
    pub lm_logp: f64,
    pub ctc_logp: f64,
    /// Fused score, plus the length bonus once finished.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Ids without the trailing eos.
    pub fn units(&self, eos: u32) -> &[u32] {
        match self.ids.split_last() {
            Some((&last, rest)) if last == eos => rest,
            _ => &self.ids,
        }
    }
}

// ---- CTC prefix scoring ---------------------------------------------------

/// Forward variables of one prefix `g`: log-probability that frames `0..=t`
/// emit `g` ending in a non-blank (`r_n`) or a blank (`r_b`).
#[derive(Debug, Clone, PartialEq)]
pub struct CtcPrefixState {
    r_n: Vec<f64>,
    r_b: Vec<f64>,
    last: Option<u32>,
    /// `ln` of the probability that the output starts with `g`.
    pub log_psi: f64,
}

/// Prefix scorer over fixed CTC posteriors.
#[derive(Debug, Clone)]
pub struct CtcPrefixScorer {
    logq: Vec<Vec<f64>>,
    blank: u32,
    eos: u32,
}

impl CtcPrefixScorer {
    pub fn new(q: &CtcPosteriors, eos: u32) -> Result<Self> {
        if q.frames() == 0 {
            return Err(Error::Empty("ctc posteriors"));
        }
        let logq = (0..q.frames())
            .map(|t| q.frame(t).iter().map(|&p| math::ln(p)).collect())
            .collect();
        Ok(Self { logq, blank: q.blank(), eos })
    }

    /// State of the empty prefix.
    pub fn initial(&self) -> CtcPrefixState {
        let t_len = self.logq.len();
        let mut r_b = vec![f64::NEG_INFINITY; t_len];
        let mut acc = 0.0;
        for t in 0..t_len {
            acc += self.logq[t][self.blank as usize];
            r_b[t] = acc;
        }
        CtcPrefixState {
            r_n: vec![f64::NEG_INFINITY; t_len],
            r_b,
            last: None,
            log_psi: 0.0,
        }
    }

    /// `ln p(output == g)` for the prefix `g` of `state`.
    pub fn full_log_prob(&self, state: &CtcPrefixState) -> f64 {
        let t = self.logq.len() - 1;
        math::log_add(state.r_n[t], state.r_b[t])
    }

    /// State of `g . c`. For eos the returned state is terminal and its
    /// `log_psi` is the probability of exactly `g`.
    pub fn extend(&self, state: &CtcPrefixState, c: u32) -> CtcPrefixState {
        if c == self.eos {
            return CtcPrefixState {
                r_n: state.r_n.clone(),
                r_b: state.r_b.clone(),
                last: Some(c),
                log_psi: self.full_log_prob(state),
            };
        }
        let t_len = self.logq.len();
        let ci = c as usize;
        let mut r_n = vec![f64::NEG_INFINITY; t_len];
        let mut r_b = vec![f64::NEG_INFINITY; t_len];
        if state.last.is_none() {
            r_n[0] = self.logq[0][ci];
        }
        let mut psi = r_n[0];
        for t in 1..t_len {
            let phi = if state.last == Some(c) {
                state.r_b[t - 1]
            } else {
                math::log_add(state.r_b[t - 1], state.r_n[t - 1])
            };
            r_n[t] = math::log_add(r_n[t - 1], phi) + self.logq[t][ci];
            r_b[t] = math::log_add(r_b[t - 1], r_n[t - 1]) + self.logq[t][self.blank as usize];
            psi = math::log_add(psi, phi + self.logq[t][ci]);
        }
        CtcPrefixState { r_n, r_b, last: Some(c), log_psi: psi }
    }
}

/// Incremental CTC prefix score `ln psi(prefix . next) - ln psi(prefix)`,
/// where `next == eos` scores the prefix as the complete output.
/// `-inf` when the extension cannot be aligned.
pub fn ctc_prefix_score(q: &CtcPosteriors, prefix: &[u32], next: u32, eos: u32) -> Result<f64> {
    let scorer = CtcPrefixScorer::new(q, eos)?;
    let mut state = scorer.initial();
    for &u in prefix {
        if u == q.blank() || u == eos {
            return Err(invalid("prefix must not contain blank or eos"));
        }
        state = scorer.extend(&state, u);
    }
    let next_state = scorer.extend(&state, next);
    if state.log_psi == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(next_state.log_psi - state.log_psi)
}

// ---- beam search ----------------------------------------------------------

struct Live<D, L> {
    hyp: Hypothesis,
    dec: D,
    dec_next: Vec<f64>,
    lm: Option<(L, Vec<f64>)>,
    ctc: Option<CtcPrefixState>,
}

struct Candidate {
    parent: usize,
    token: u32,
    att: f64,
    lm: f64,
    ctc: Option<CtcPrefixState>,
    score: f64,
}

fn rank(a_score: f64, a_ids: &[u32], b_score: f64, b_ids: &[u32]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_ids.cmp(b_ids))
}

fn with_token(ids: &[u32], token: u32) -> Vec<u32> {
    let mut v = Vec::with_capacity(ids.len() + 1);
    v.extend_from_slice(ids);
    v.push(token);
    v
}

/// Beam search over `dec`, optionally fused with `lm` and CTC prefix scores
/// from `ctc`. Returns at most `beam` finished hypotheses, best first.
///
/// eos is forced once `max_len` ids would be reached. The search stops early
/// when no live hypothesis can still beat the best finished one.
pub fn beam_search<D, L>(
    dec: &mut D,
    mut lm: Option<&mut L>,
    ctc: Option<&CtcPosteriors>,
    frames: usize,
    tokens: &SearchTokens,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>>
where
    D: SequenceScorer,
    L: SequenceScorer,
{
    cfg.validate()?;
    if frames == 0 {
        return Err(Error::Empty("encoder output"));
    }
    let max_len = cfg.max_len(frames);
    let use_lm = cfg.lm_weight != 0.0 && lm.is_some();
    let prefix = match ctc {
        Some(q) if cfg.ctc_weight > 0.0 => Some(CtcPrefixScorer::new(q, tokens.eos)?),
        _ => None,
    };
    let (d0, dnext) = dec.start()?;
    let l0 = match (use_lm, lm.as_deref_mut()) {
        (true, Some(l)) => Some(l.start()?),
        _ => None,
    };
    let mut live = vec![Live {
        hyp: Hypothesis {
            ids: Vec::new(),
            att_logp: 0.0,
            lm_logp: 0.0,
            ctc_logp: 0.0,
            score: 0.0,
            finished: false,
        },
        dec: d0,
        dec_next: dnext,
        lm: l0,
        ctc: prefix.as_ref().map(CtcPrefixScorer::initial),
    }];
    let mut done: Vec<Hypothesis> = Vec::new();

    for step in 0..max_len {
        let last_step = step + 1 == max_len;
        let mut cands = Vec::new();
        for (pi, h) in live.iter().enumerate() {
            for token in 0..tokens.vocab_size as u32 {
                if tokens.skip.contains(&token) || (last_step && token != tokens.eos) {
                    continue;
                }
                let att = h.hyp.att_logp + h.dec_next[token as usize];
                let lm_score = match &h.lm {
                    Some((_, next)) => h.hyp.lm_logp + next[token as usize],
                    None => h.hyp.lm_logp,
                };
                let ctc_state = match (&prefix, &h.ctc) {
                    (Some(p), Some(s)) => Some(p.extend(s, token)),
                    _ => None,
                };
                let ctc_score = ctc_state.as_ref().map_or(0.0, |s| s.log_psi);
                let mut score = att;
                if use_lm {
                    score += cfg.lm_weight * lm_score;
                }
                if ctc_state.is_some() {
                    score += cfg.ctc_weight * ctc_score;
                }
                if score == f64::NEG_INFINITY {
                    continue;
                }
                cands.push(Candidate {
                    parent: pi,
                    token,
                    att,
                    lm: lm_score,
                    ctc: ctc_state,
                    score,
                });
            }
        }
        cands.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then_with(|| live[a.parent].hyp.ids.cmp(&live[b.parent].hyp.ids))
                .then_with(|| a.token.cmp(&b.token))
        });
        cands.truncate(cfg.beam);

        let mut next_live = Vec::with_capacity(cands.len());
        for c in cands {
            let parent = &live[c.parent];
            let hyp = Hypothesis {
                ids: with_token(&parent.hyp.ids, c.token),
                att_logp: c.att,
                lm_logp: c.lm,
                ctc_logp: c.ctc.as_ref().map_or(0.0, |s| s.log_psi),
                score: c.score,
                finished: c.token == tokens.eos,
            };
            if hyp.finished {
                let mut hyp = hyp;
                hyp.score += cfg.length_penalty * hyp.ids.len() as f64;
                done.push(hyp);
                continue;
            }
            let (dstate, dnext) = dec.advance(&parent.dec, c.token)?;
            let lm_next = match (&parent.lm, lm.as_deref_mut()) {
                (Some((ls, _)), Some(l)) => Some(l.advance(ls, c.token)?),
                _ => None,
            };
            next_live.push(Live { hyp, dec: dstate, dec_next: dnext, lm: lm_next, ctc: c.ctc });
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
        if let Some(best) = done.iter().map(|h| h.score).reduce(f64::max) {
            // Partial scores never increase, so the bonus bounds what a live
            // hypothesis can still reach.
            let can_improve = live.iter().any(|l| {
                let bonus = if cfg.length_penalty >= 0.0 {
                    cfg.length_penalty * max_len as f64
                } else {
                    cfg.length_penalty * (l.hyp.ids.len() + 1) as f64
                };
                l.hyp.score + bonus >= best
            });
            if !can_improve {
                break;
            }
        }
    }
    done.sort_by(|a, b| rank(a.score, &a.ids, b.score, &b.ids));
    done.truncate(cfg.beam);
    Ok(done)
}

/// Picks the best next unit at every step (first index on ties) until eos.
pub fn greedy_search<D, L>(
    dec: &mut D,
    mut lm: Option<&mut L>,
    ctc: Option<&CtcPosteriors>,
    frames: usize,
    tokens: &SearchTokens,
    cfg: &DecodeConfig,
) -> Result<Hypothesis>
where
    D: SequenceScorer,
    L: SequenceScorer,
{
    cfg.validate()?;
    if frames == 0 {
        return Err(Error::Empty("encoder output"));
    }
    let max_len = cfg.max_len(frames);
    let use_lm = cfg.lm_weight != 0.0 && lm.is_some();
    let prefix = match ctc {
        Some(q) if cfg.ctc_weight > 0.0 => Some(CtcPrefixScorer::new(q, tokens.eos)?),
        _ => None,
    };
    let (mut dstate, mut dnext) = dec.start()?;
    let mut lstate = match (use_lm, lm.as_deref_mut()) {
        (true, Some(l)) => Some(l.start()?),
        _ => None,
    };
    let mut cstate = prefix.as_ref().map(CtcPrefixScorer::initial);
    let mut hyp = Hypothesis {
        ids: Vec::new(),
        att_logp: 0.0,
        lm_logp: 0.0,
        ctc_logp: 0.0,
        score: 0.0,
        finished: false,
    };
    for step in 0..max_len {
        let mut best: Option<(f64, u32, Option<CtcPrefixState>)> = None;
        for token in 0..tokens.vocab_size as u32 {
            if tokens.skip.contains(&token) || (step + 1 == max_len && token != tokens.eos) {
                continue;
            }
            let mut score = hyp.att_logp + dnext[token as usize];
            if let Some((_, next)) = &lstate {
                score += cfg.lm_weight * (hyp.lm_logp + next[token as usize]);
            }
            let cs = match (&prefix, &cstate) {
                (Some(p), Some(s)) => {
                    let n = p.extend(s, token);
                    score += cfg.ctc_weight * n.log_psi;
                    Some(n)
                }
                _ => None,
            };
            if best.as_ref().map_or(true, |(b, _, _)| score > *b) {
                best = Some((score, token, cs));
            }
        }
        let Some((score, token, cs)) = best else { break };
        hyp.att_logp += dnext[token as usize];
        if let Some((_, next)) = &lstate {
            hyp.lm_logp += next[token as usize];
        }
        if let Some(s) = &cs {
            hyp.ctc_logp = s.log_psi;
        }
        hyp.score = score;
        hyp.ids.push(token);
        if token == tokens.eos {
            hyp.finished = true;
            hyp.score += cfg.length_penalty * hyp.ids.len() as f64;
            break;
        }
        let (ds, dn) = dec.advance(&dstate, token)?;
        dstate = ds;
        dnext = dn;
        if let (Some((ls, _)), Some(l)) = (&lstate, lm.as_deref_mut()) {
            lstate = Some(l.advance(ls, token)?);
        }
        cstate = cs;
    }
    Ok(hyp)
}

/// A scorer with no opinion (all-zero log-scores), usable as the LM type
/// parameter when no LM is present.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoScorer {
    pub vocab_size: usize,
}

impl SequenceScorer for NoScorer {
    type State = ();

    fn start(&mut self) -> Result<((), Vec<f64>)> {
        Ok(((), vec![0.0; self.vocab_size]))
    }

    fn advance(&mut self, _: &(), _: u32) -> Result<((), Vec<f64>)> {
        Ok(((), vec![0.0; self.vocab_size]))
    }
}
