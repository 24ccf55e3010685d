//! Joint CTC/attention training with AdaDelta.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::encoder::downsampled_len;
use crate::ctc::min_frames;
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::model::{utterance_loss, Model};
use crate::params::ParamStore;
use crate::rng::{self, streams};
use crate::tensor::Tensor;

/// `alpha * ctc + (1 - alpha) * att`.
pub fn joint_loss(ctc: f64, att: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(if alpha == 0.0 {
        att
    } else if alpha == 1.0 {
        ctc
    } else {
        alpha * ctc + (1.0 - alpha) * att
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Graph form of [`joint_loss`]; a branch may be absent only when its weight
/// is zero.
pub fn joint_loss_graph(g: &mut Graph, ctc: Option<Var>, att: Option<Var>, alpha: f64) -> Result<Var> {
    check_alpha(alpha)?;
    match (ctc, att) {
        (Some(c), _) if alpha == 1.0 => Ok(c),
        (_, Some(a)) if alpha == 0.0 => Ok(a),
        (Some(c), Some(a)) => {
            let c = g.scale(c, alpha);
            let a = g.scale(a, 1.0 - alpha);
            g.add(c, a)
        }
        _ => Err(invalid("joint loss is missing a branch with non-zero weight")),
    }
}

/// Result of global-norm clipping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClipOutcome {
    /// Gradients are finite; carries the norm before clipping.
    Norm(f64),
    NonFinite,
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut ParamStore, max_norm: f64) -> ClipOutcome {
    let sq: f64 = grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v * v)
        .sum();
    let norm = math::sqrt(sq);
    if !norm.is_finite() {
        return ClipOutcome::NonFinite;
    }
    if norm > max_norm {
        let k = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            for v in t.data_mut() {
                *v *= k;
            }
        }
    }
    ClipOutcome::Norm(norm)
}

/// AdaDelta accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaDelta {
    pub rho: f64,
    pub epsilon: f64,
    /// Running mean of squared gradients.
    pub g2: ParamStore,
    /// Running mean of squared updates.
    pub dx2: ParamStore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    /// Update applied; gradient norm before clipping.
    Applied { grad_norm: f64 },
    Skipped,
}

impl AdaDelta {
    /// Zero accumulators shaped like `params`.
    pub fn new(params: &ParamStore, rho: f64, epsilon: f64) -> Self {
        let mut g2 = ParamStore::new();
        for (name, t) in params.iter() {
            g2.insert(name, Tensor::zeros(t.dims()));
        }
        Self { rho, epsilon, dx2: g2.clone(), g2 }
    }

    /// One update. `l2 * theta` is added to the gradients, which are then
    /// clipped to `clip_norm` jointly. A non-finite gradient skips the step
    /// without touching parameters or accumulators.
    pub fn step(&mut self, params: &mut ParamStore, mut grads: ParamStore, l2: f64, clip_norm: f64) -> Result<StepOutcome> {
        if l2 != 0.0 {
            for (name, g) in grads.iter_mut() {
                let p = params.get(name)?;
                for (gv, pv) in g.data_mut().iter_mut().zip(p.data()) {
                    *gv += l2 * pv;
                }
            }
        }
        let grad_norm = match clip_global_norm(&mut grads, clip_norm) {
            ClipOutcome::Norm(n) => n,
            ClipOutcome::NonFinite => {
                log::warn!("optimizer step skipped: non-finite gradient");
                return Ok(StepOutcome::Skipped);
            }
        };
        let (rho, eps) = (self.rho, self.epsilon);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            let g2 = self.g2.get_mut(name)?;
            let dx2 = self.dx2.get_mut(name)?;
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(g2.data_mut().iter_mut().zip(dx2.data_mut().iter_mut()));
            for ((w, &gv), (a, b)) in it {
                *a = rho * *a + (1.0 - rho) * gv * gv;
                let dx = -math::sqrt(*b + eps) / math::sqrt(*a + eps) * gv;
                *b = rho * *b + (1.0 - rho) * dx * dx;
                *w += dx;
            }
        }
        Ok(StepOutcome::Applied { grad_norm })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub rho: f64,
    pub l2: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub val_interval: usize,
    pub eps_decay: f64,
    pub iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            epsilon: 1e-8,
            rho: 0.95,
            l2: 0.0,
            clip_norm: 5.0,
            batch_size: 8,
            val_interval: 1000,
            eps_decay: 0.1,
            iterations: 3000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.epsilon > 0.0) || !(0.0..1.0).contains(&self.rho) {
            return Err(invalid("epsilon must be > 0 and rho in [0, 1)"));
        }
        if !(self.l2 >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(invalid("l2 must be >= 0 and clip_norm > 0"));
        }
        if self.batch_size == 0 || self.val_interval == 0 {
            return Err(invalid("batch_size and val_interval must be positive"));
        }
        if !(self.eps_decay > 0.0) {
            return Err(invalid("eps_decay must be > 0"));
        }
        Ok(())
    }
}

/// Features and target units of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Tensor,
    pub labels: Vec<u32>,
}

/// Epsilon after a validation measurement: decayed when `current` is
/// strictly lower than `previous`.
pub fn next_epsilon(epsilon: f64, previous: Option<f64>, current: f64, decay: f64) -> f64 {
    match previous {
        Some(p) if current < p => epsilon * decay,
        _ => epsilon,
    }
}

/// Gradient and statistics of one utterance.
#[derive(Debug, Clone)]
pub struct UtteranceGrad {
    pub grads: Option<ParamStore>,
    pub loss: f64,
    pub correct: usize,
    pub steps: usize,
    pub infeasible: bool,
}

/// Runs the per-utterance jobs of a batch. Results must come back in index
/// order so the summed gradient does not depend on scheduling.
pub trait Executor {
    fn map(&self, n: usize, job: &(dyn Fn(usize) -> Result<UtteranceGrad> + Sync)) -> Vec<Result<UtteranceGrad>>;
}

/// Runs jobs one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map(&self, n: usize, job: &(dyn Fn(usize) -> Result<UtteranceGrad> + Sync)) -> Vec<Result<UtteranceGrad>> {
        (0..n).map(job).collect()
    }
}

/// Loss and parameter gradient for one utterance.
pub fn utterance_grad(model: &Model, utt: &Utterance, alpha: f64) -> Result<UtteranceGrad> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let l = utterance_loss(&mut g, &p, &model.cfg, &utt.features, &utt.labels, alpha)?;
    if l.infeasible() {
        return Ok(UtteranceGrad { grads: None, loss: f64::INFINITY, correct: 0, steps: 0, infeasible: true });
    }
    g.backward(l.loss)?;
    Ok(UtteranceGrad {
        grads: Some(p.grads(&g)),
        loss: g.value(l.loss).item(),
        correct: l.correct,
        steps: l.steps,
        infeasible: false,
    })
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    /// Mean per-utterance loss since the previous row.
    pub train_loss: f64,
    /// Teacher-forced token accuracy since the previous row.
    pub train_acc: f64,
    pub val_acc: f64,
    /// Epsilon in effect after this row's decay decision.
    pub epsilon: f64,
}

/// Outcome of one [`Trainer::step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    /// Mean loss over the batch's feasible utterances (NaN if none).
    pub loss: f64,
    pub skipped_utterances: usize,
    pub applied: bool,
    pub metrics: Option<MetricsRow>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Interval {
    loss_sum: f64,
    utterances: usize,
    correct: usize,
    steps: usize,
}

/// Training loop state. Batches are length-sorted buckets visited in a
/// per-epoch order derived from the seed, so the state is fully described
/// by the parameters, accumulators, iteration count and interval sums.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub opt: AdaDelta,
    pub cfg: TrainConfig,
    pub seed: u64,
    pub iteration: usize,
    pub prev_val_acc: Option<f64>,
    interval: Interval,
    train: Vec<Utterance>,
    val: Vec<Utterance>,
    batches: Vec<Vec<usize>>,
}

fn feasible(utt: &Utterance) -> bool {
    downsampled_len(utt.features.rows()) >= min_frames(&utt.labels)
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, seed: u64, train: Vec<Utterance>, val: Vec<Utterance>) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Empty("training set"));
        }
        if cfg.alpha > 0.0 && !train.iter().any(feasible) {
            return Err(Error::AllInfeasible(format!(
                "{} utterances, none has enough frames after 4x downsampling for its labels",
                train.len()
            )));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.sort_by_key(|&i| (train[i].features.rows(), i));
        let batches = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
        let opt = AdaDelta::new(&model.params, cfg.rho, cfg.epsilon);
        Ok(Self {
            model,
            opt,
            cfg,
            seed,
            iteration: 0,
            prev_val_acc: None,
            interval: Interval::default(),
            train,
            val,
            batches,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.batches.len()
    }

    /// Training-set indices of the batch used at `iteration`.
    pub fn batch_at(&self, iteration: usize) -> &[usize] {
        let n = self.batches.len();
        let epoch = (iteration / n) as u64;
        let mut order: Vec<usize> = (0..n).collect();
        rng::shuffle(&mut rng::stream(self.seed, streams::EPOCH_ORDER + (epoch << 16)), &mut order);
        &self.batches[order[iteration % n]]
    }

    /// Teacher-forced token accuracy over the validation set (NaN when it
    /// is empty).
    pub fn validation_accuracy(&self) -> Result<f64> {
        let (mut hit, mut total) = (0, 0);
        for u in &self.val {
            let (c, s) = self.model.teacher_forced_accuracy(&u.features, &u.labels)?;
            hit += c;
            total += s;
        }
        Ok(if total == 0 { f64::NAN } else { hit as f64 / total as f64 })
    }

    /// Runs one batch and, at validation boundaries, the epsilon schedule.
    pub fn step(&mut self, exec: &dyn Executor) -> Result<StepReport> {
        let batch = self.batch_at(self.iteration).to_vec();
        let (model, train, alpha) = (&self.model, &self.train, self.cfg.alpha);
        let results = exec.map(batch.len(), &|k| utterance_grad(model, &train[batch[k]], alpha));
        let mut sum: Option<ParamStore> = None;
        let (mut loss, mut used, mut skipped) = (0.0, 0usize, 0usize);
        for (k, r) in results.into_iter().enumerate() {
            let r = r?;
            if r.infeasible {
                log::warn!("skipping {}: labels cannot be aligned to its frames", train[batch[k]].id);
                skipped += 1;
                continue;
            }
            loss += r.loss;
            used += 1;
            self.interval.correct += r.correct;
            self.interval.steps += r.steps;
            let g = r.grads.ok_or(Error::Empty("utterance gradient"))?;
            match &mut sum {
                None => sum = Some(g),
                Some(acc) => {
                    for (name, t) in acc.iter_mut() {
                        for (a, b) in t.data_mut().iter_mut().zip(g.get(name)?.data()) {
                            *a += b;
                        }
                    }
                }
            }
        }
        let mut applied = false;
        if let Some(mut grads) = sum {
            let k = 1.0 / used as f64;
            for (_, t) in grads.iter_mut() {
                for v in t.data_mut() {
                    *v *= k;
                }
            }
            applied = matches!(
                self.opt.step(&mut self.model.params, grads, self.cfg.l2, self.cfg.clip_norm)?,
                StepOutcome::Applied { .. }
            );
            self.interval.loss_sum += loss;
            self.interval.utterances += used;
        }
        self.iteration += 1;
        let metrics = if self.iteration % self.cfg.val_interval == 0 {
            Some(self.measure()?)
        } else {
            None
        };
        Ok(StepReport {
            iteration: self.iteration,
            loss: if used == 0 { f64::NAN } else { loss / used as f64 },
            skipped_utterances: skipped,
            applied,
            metrics,
        })
    }

    /// Validation measurement and epsilon decision; closes the current
    /// metrics interval.
    pub fn measure(&mut self) -> Result<MetricsRow> {
        let val_acc = self.validation_accuracy()?;
        if !val_acc.is_nan() {
            self.opt.epsilon = next_epsilon(self.opt.epsilon, self.prev_val_acc, val_acc, self.cfg.eps_decay);
            self.prev_val_acc = Some(val_acc);
        }
        let iv = core::mem::take(&mut self.interval);
        Ok(MetricsRow {
            iteration: self.iteration,
            train_loss: if iv.utterances == 0 { f64::NAN } else { iv.loss_sum / iv.utterances as f64 },
            train_acc: if iv.steps == 0 { f64::NAN } else { iv.correct as f64 / iv.steps as f64 },
            val_acc,
            epsilon: self.opt.epsilon,
        })
    }

    /// Runs until `cfg.iterations`, passing every report to `on_step`.
    pub fn run(&mut self, exec: &dyn Executor, mut on_step: impl FnMut(&StepReport)) -> Result<()> {
        while self.iteration < self.cfg.iterations {
            let r = self.step(exec)?;
            on_step(&r);
        }
        Ok(())
    }

    /// Everything needed to resume: parameters, optimizer accumulators
    /// (`opt.g2.*`, `opt.dx2.*`) and counters (`meta.*`).
    pub fn state_tensors(&self) -> ParamStore {
        let mut out = self.model.params.clone();
        for (name, t) in self.opt.g2.iter() {
            out.insert(&format!("opt.g2.{name}"), t.clone());
        }
        for (name, t) in self.opt.dx2.iter() {
            out.insert(&format!("opt.dx2.{name}"), t.clone());
        }
        let meta = [
            ("meta.iteration", self.iteration as f64),
            ("meta.epsilon", self.opt.epsilon),
            ("meta.prev_val_acc", self.prev_val_acc.unwrap_or(f64::NAN)),
            ("meta.interval.loss_sum", self.interval.loss_sum),
            ("meta.interval.utterances", self.interval.utterances as f64),
            ("meta.interval.correct", self.interval.correct as f64),
            ("meta.interval.steps", self.interval.steps as f64),
        ];
        for (name, v) in meta {
            out.insert(name, Tensor::scalar(v));
        }
        out
    }

    /// Restores what [`Trainer::state_tensors`] saved. Datasets, config and
    /// seed must match the original run.
    pub fn restore(&mut self, state: &ParamStore) -> Result<()> {
        let specs = self.model.cfg.param_specs();
        let mut params = ParamStore::new();
        let mut g2 = ParamStore::new();
        let mut dx2 = ParamStore::new();
        for spec in &specs {
            params.insert(&spec.name, state.get(&spec.name)?.clone());
            g2.insert(&spec.name, state.get(&format!("opt.g2.{}", spec.name))?.clone());
            dx2.insert(&spec.name, state.get(&format!("opt.dx2.{}", spec.name))?.clone());
        }
        params.check(&specs)?;
        g2.check(&specs)?;
        dx2.check(&specs)?;
        let scalar = |name: &str| -> Result<f64> { Ok(state.get(name)?.item()) };
        self.model.params = params;
        self.opt.g2 = g2;
        self.opt.dx2 = dx2;
        self.opt.epsilon = scalar("meta.epsilon")?;
        self.iteration = scalar("meta.iteration")? as usize;
        let prev = scalar("meta.prev_val_acc")?;
        self.prev_val_acc = (!prev.is_nan()).then_some(prev);
        self.interval = Interval {
            loss_sum: scalar("meta.interval.loss_sum")?,
            utterances: scalar("meta.interval.utterances")? as usize,
            correct: scalar("meta.interval.correct")? as usize,
            steps: scalar("meta.interval.steps")? as usize,
        };
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn single(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![1], vec![v]).unwrap());
        p
    }

    #[test]
    fn joint_loss_examples() {
        assert_eq!(joint_loss(2.0, 4.0, 0.5).unwrap(), 3.0);
        assert_eq!(joint_loss(2.0, 4.0, 0.0).unwrap(), 4.0);
        assert_eq!(joint_loss(2.0, 4.0, 1.0).unwrap(), 2.0);
        assert_eq!(joint_loss(f64::INFINITY, 4.0, 0.0).unwrap(), 4.0);
        assert!(joint_loss(2.0, 4.0, 1.5).is_err());
        assert!(joint_loss(2.0, 4.0, -0.1).is_err());
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(0.3);
        let mut opt = AdaDelta::new(&p, 0.95, 1e-8);
        opt.step(&mut p, single(0.0), 0.0, 5.0).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.3);
    }

    #[test]
    fn first_step_by_hand() {
        let mut p = single(0.0);
        let mut opt = AdaDelta::new(&p, 0.95, 1e-8);
        opt.step(&mut p, single(1.0), 0.0, 5.0).unwrap();
        let expect = -math::sqrt(1e-8) / math::sqrt(0.05 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expect).abs() < 1e-18);
    }

    #[test]
    fn clipping_halves_norm_ten() {
        let mut g = ParamStore::new();
        g.insert("a", Tensor::new(vec![2], vec![6.0, 8.0]).unwrap());
        assert_eq!(clip_global_norm(&mut g, 5.0), ClipOutcome::Norm(10.0));
        assert_eq!(g.get("a").unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut p = single(0.3);
        let mut opt = AdaDelta::new(&p, 0.95, 1e-8);
        let r = opt.step(&mut p, single(f64::NAN), 0.0, 5.0).unwrap();
        assert_eq!(r, StepOutcome::Skipped);
        assert_eq!(p.get("w").unwrap().data()[0], 0.3);
        assert_eq!(opt.g2.get("w").unwrap().data()[0], 0.0);
    }

    #[test]
    fn l2_shrinks_magnitude() {
        let mut p = single(-0.7);
        let mut opt = AdaDelta::new(&p, 0.95, 1e-6);
        let mut last = 0.7;
        for _ in 0..20 {
            opt.step(&mut p, single(0.0), 0.1, 5.0).unwrap();
            let now = p.get("w").unwrap().data()[0].abs();
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn epsilon_decays_on_strict_drop() {
        let e = next_epsilon(1e-8, None, 0.5, 0.1);
        assert_eq!(e, 1e-8);
        let e = next_epsilon(e, Some(0.5), 0.4, 0.1);
        assert!((e - 1e-9).abs() < 1e-24);
        assert_eq!(next_epsilon(1e-8, Some(0.5), 0.5, 0.1), 1e-8);
    }
}
