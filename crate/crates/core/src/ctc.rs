//! Connectionist temporal classification.
//!
//! A CTC path assigns one unit (or blank) to every encoder frame. Its
//! probability is the product of the per-frame posteriors, and the likelihood
//! of a label sequence sums over every path that collapses to it (merge
//! repeats, then drop blanks). The loss is the negative log of that sum,
//! computed here with the forward algorithm over the blank-interleaved label
//! sequence in log space. [`ctc_brute_force`] enumerates the paths literally
//! and exists to check the recursion.
//!
//! The blank unit is id 0 throughout the crate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::{self, LstmSpec};
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::math::{self, log_add};
use crate::params::{Bound, ParamSpec};
use crate::tensor::Tensor;

pub const BLANK: u32 = 0;

/// Row-stochastic matrix of per-frame unit posteriors, `[T', V]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcPosteriors {
    q: Tensor,
    blank: u32,
}

impl CtcPosteriors {
    /// Validates that every row is a probability distribution (entries in
    /// `[0, 1]`, sum within `1e-10` of one).
    pub fn new(q: Tensor, blank: u32) -> Result<Self> {
        if q.rank() != 2 {
            return Err(invalid(format!("posteriors must be [T, V], got {:?}", q.dims())));
        }
        if blank as usize >= q.last_dim() {
            return Err(invalid(format!("blank {blank} outside {} units", q.last_dim())));
        }
        for t in 0..q.rows() {
            let row = q.row_slice(t);
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(invalid(format!("frame {t} has entries outside [0, 1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(invalid(format!("frame {t} sums to {s}")));
            }
        }
        Ok(Self { q, blank })
    }

    /// Builds posteriors from per-frame log-probabilities.
    pub fn from_log_probs(logp: &Tensor, blank: u32) -> Result<Self> {
        let data = logp.data().iter().map(|&v| math::exp(v)).collect();
        Self::new(Tensor::new(logp.dims().to_vec(), data)?, blank)
    }

    pub fn frames(&self) -> usize {
        self.q.rows()
    }

    pub fn units(&self) -> usize {
        self.q.last_dim()
    }

    pub fn blank(&self) -> u32 {
        self.blank
    }

    pub fn prob(&self, t: usize, k: u32) -> f64 {
        self.q.data()[t * self.units() + k as usize]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.q.row_slice(t)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.q
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.q.data().iter().map(|&p| math::ln(p)).collect()
    }
}

/// Result of a CTC likelihood evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CtcOutcome {
    /// Negative log-likelihood of the labels.
    Loss(f64),
    /// No path of the available length collapses to the labels.
    Infeasible,
}

impl CtcOutcome {
    /// The loss, with an infeasible alignment reported as `+inf`.
    pub fn value(self) -> f64 {
        match self {
            CtcOutcome::Loss(v) => v,
            CtcOutcome::Infeasible => f64::INFINITY,
        }
    }

    pub fn is_infeasible(self) -> bool {
        matches!(self, CtcOutcome::Infeasible)
    }
}

/// Minimum number of frames needed to emit `labels`: one per label plus a
/// separating blank between equal neighbours.
pub fn min_frames(labels: &[u32]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Merges adjacent repeats, then removes blanks.
pub fn collapse(path: &[u32], blank: u32) -> Vec<u32> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != blank {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// Probability of a single frame-level path: the product of its posteriors.
pub fn ctc_path_prob(q: &CtcPosteriors, path: &[u32]) -> Result<f64> {
    if path.len() != q.frames() {
        return Err(invalid(format!(
            "path has {} steps, posteriors have {} frames",
            path.len(),
            q.frames()
        )));
    }
    let mut p = 1.0;
    for (t, &c) in path.iter().enumerate() {
        if c as usize >= q.units() {
            return Err(Error::InvalidUnit { id: c, size: q.units() });
        }
        p *= q.prob(t, c);
    }
    Ok(p)
}

fn check_labels(labels: &[u32], units: usize, blank: u32) -> Result<()> {
    for &l in labels {
        if l == blank {
            return Err(invalid("labels must not contain the blank unit"));
        }
        if l as usize >= units {
            return Err(Error::InvalidUnit { id: l, size: units });
        }
    }
    Ok(())
}

/// `-ln p(labels | q)` by the forward algorithm.
pub fn ctc_loss(q: &CtcPosteriors, labels: &[u32]) -> Result<CtcOutcome> {
    check_labels(labels, q.units(), q.blank)?;
    let logp = q.log_probs();
    let alpha = forward_log(&logp, q.frames(), q.units(), labels, q.blank);
    let ll = final_log_likelihood(&alpha, q.frames(), labels.len());
    Ok(if ll == f64::NEG_INFINITY {
        CtcOutcome::Infeasible
    } else {
        CtcOutcome::Loss(-ll)
    })
}

/// Largest path space [`ctc_brute_force`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u64 = 10_000_000;

/// `-ln p(labels | q)` by enumerating all `V^T` paths and summing those that
/// collapse to `labels`.
pub fn ctc_brute_force(q: &CtcPosteriors, labels: &[u32]) -> Result<CtcOutcome> {
    check_labels(labels, q.units(), q.blank)?;
    let (t_len, v) = (q.frames(), q.units());
    let mut total_paths: u64 = 1;
    for _ in 0..t_len {
        total_paths = total_paths.saturating_mul(v as u64);
        if total_paths > BRUTE_FORCE_LIMIT {
            return Err(invalid(format!(
                "{v}^{t_len} paths exceed the enumeration limit of {BRUTE_FORCE_LIMIT}"
            )));
        }
    }
    let mut path = vec![0u32; t_len];
    let mut total = 0.0;
    for mut code in 0..total_paths {
        for slot in path.iter_mut() {
            *slot = (code % v as u64) as u32;
            code /= v as u64;
        }
        if collapse(&path, q.blank) == labels {
            total += ctc_path_prob(q, &path)?;
        }
    }
    Ok(if total > 0.0 {
        CtcOutcome::Loss(-math::ln(total))
    } else {
        CtcOutcome::Infeasible
    })
}

/// Per-frame argmax, collapsed.
pub fn greedy_collapse(q: &CtcPosteriors) -> Vec<u32> {
    let path: Vec<u32> = (0..q.frames()).map(|t| math::argmax(q.frame(t)) as u32).collect();
    collapse(&path, q.blank)
}

/// Blank-interleaved label sequence `[blank, l1, blank, l2, ..., blank]`.
fn extended(labels: &[u32], blank: u32) -> Vec<u32> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &l in labels {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

/// True when the forward recursion may skip from `s - 2` into `s`.
fn can_skip(ext: &[u32], s: usize, blank: u32) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

/// Log forward variables, `[T, S]` row-major with `S = 2L + 1`.
fn forward_log(logp: &[f64], t_len: usize, v: usize, labels: &[u32], blank: u32) -> Vec<f64> {
    let ext = extended(labels, blank);
    let s_len = ext.len();
    let mut alpha = vec![f64::NEG_INFINITY; t_len * s_len];
    alpha[0] = logp[blank as usize];
    if s_len > 1 {
        alpha[1] = logp[ext[1] as usize];
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if can_skip(&ext, s, blank) {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = a + logp[t * v + ext[s] as usize];
        }
    }
    alpha
}

fn final_log_likelihood(alpha: &[f64], t_len: usize, label_len: usize) -> f64 {
    let s_len = 2 * label_len + 1;
    let last = &alpha[(t_len - 1) * s_len..];
    if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    }
}

pub(crate) struct ForwardBackward {
    pub loss: f64,
    /// Posterior probability, `[T, V]`, that frame `t` emits unit `k`
    /// given the labels. This is `-d loss / d logp[t][k]`.
    pub occupancy: Vec<f64>,
}

/// Loss and occupancy for per-frame log-probabilities `logp` (`[T, V]`).
/// `None` when the labels cannot be aligned.
pub(crate) fn forward_backward(
    logp: &[f64],
    t_len: usize,
    v: usize,
    labels: &[u32],
    blank: u32,
) -> Option<ForwardBackward> {
    let ext = extended(labels, blank);
    let s_len = ext.len();
    let alpha = forward_log(logp, t_len, v, labels, blank);
    let ll = final_log_likelihood(&alpha, t_len, labels.len());
    if ll == f64::NEG_INFINITY || ll.is_nan() {
        return None;
    }
    // beta[t][s]: log probability of completing the labels from state s at
    // frame t, excluding frame t's own emission.
    let mut beta = vec![f64::NEG_INFINITY; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        let emit = |s: usize| next[s] + logp[(t + 1) * v + ext[s] as usize];
        for s in 0..s_len {
            let mut b = emit(s);
            if s + 1 < s_len {
                b = log_add(b, emit(s + 1));
            }
            if s + 2 < s_len && can_skip(&ext, s + 2, blank) {
                b = log_add(b, emit(s + 2));
            }
            cur[s] = b;
        }
    }
    let mut occupancy = vec![0.0; t_len * v];
    for t in 0..t_len {
        for s in 0..s_len {
            let lp = alpha[t * s_len + s] + beta[t * s_len + s] - ll;
            if lp > f64::NEG_INFINITY {
                occupancy[t * v + ext[s] as usize] += math::exp(lp);
            }
        }
    }
    Some(ForwardBackward { loss: -ll, occupancy })
}

// ---- CTC branch ----------------------------------------------------------

/// Shape of the CTC branch: an optional dedicated BiLSTM over the shared
/// encoder output, then a projection to the units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CtcBranchConfig {
    /// Width of the shared encoder output (`2 * cells_per_direction`).
    pub input_dim: usize,
    /// Cells per direction of the branch BiLSTM; `None` disables it.
    pub bilstm_cells: Option<usize>,
    pub vocab_size: usize,
}

impl CtcBranchConfig {
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let proj_in = match self.bilstm_cells {
            Some(cells) => {
                specs.extend(LstmSpec::new("ctc.lstm.fwd", self.input_dim, cells).param_specs());
                specs.extend(LstmSpec::new("ctc.lstm.bwd", self.input_dim, cells).param_specs());
                2 * cells
            }
            None => self.input_dim,
        };
        specs.push(ParamSpec::uniform("ctc.out.w", &[proj_in, self.vocab_size]));
        specs.push(ParamSpec::uniform("ctc.out.b", &[self.vocab_size]));
        specs
    }
}

/// Per-frame log-posteriors `[T', V]` of the CTC branch on encoder output `h`.
pub fn ctc_branch_graph(g: &mut Graph, h: Var, p: &Bound, cfg: &CtcBranchConfig) -> Result<Var> {
    let x = match cfg.bilstm_cells {
        Some(_) => {
            let fwd = p.lstm("ctc.lstm.fwd")?;
            let bwd = p.lstm("ctc.lstm.bwd")?;
            encoder::bilstm(g, h, &fwd, &bwd)?
        }
        None => h,
    };
    let logits = g.matmul(x, p.get("ctc.out.w")?)?;
    let logits = g.add_bias(logits, p.get("ctc.out.b")?)?;
    Ok(g.log_softmax(logits))
}
