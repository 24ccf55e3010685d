//! The full recognizer: shared encoder, CTC branch and attention decoder.

use alloc::vec::Vec;

use crate::attention::{self, AttentionConfig, DecoderSession, EncoderContext, WeightMode};
use crate::ctc::{self, CtcBranchConfig, CtcPosteriors, BLANK};
use crate::encoder::{self, EncodedSequence, EncoderConfig};
use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamSpec, ParamStore};
use crate::rng::{self, streams};
use crate::subword::{EOS, SOS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub encoder: EncoderConfig,
    /// Dedicated BiLSTM in front of the CTC projection, with the encoder's
    /// cells per direction.
    pub ctc_bilstm: bool,
    pub att_dim: usize,
    pub location_filters: usize,
    pub location_width: usize,
    pub embed_dim: usize,
    pub dec_units: usize,
    pub dec_layers: usize,
    pub weight_mode: WeightMode,
}

impl ModelConfig {
    /// Desk-scale defaults for a vocabulary of `vocab_size` units.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            encoder: EncoderConfig::default(),
            ctc_bilstm: true,
            att_dim: 64,
            location_filters: 4,
            location_width: 7,
            embed_dim: 32,
            dec_units: 64,
            dec_layers: 2,
            weight_mode: WeightMode::Smoothed,
        }
    }

    pub fn ctc_config(&self) -> CtcBranchConfig {
        CtcBranchConfig {
            input_dim: self.encoder.output_dim(),
            bilstm_cells: self.ctc_bilstm.then_some(self.encoder.cells_per_direction),
            vocab_size: self.vocab_size,
        }
    }

    pub fn attention_config(&self) -> AttentionConfig {
        AttentionConfig {
            encoder_dim: self.encoder.output_dim(),
            att_dim: self.att_dim,
            filters: self.location_filters,
            filter_width: self.location_width,
            embed_dim: self.embed_dim,
            dec_units: self.dec_units,
            dec_layers: self.dec_layers,
            vocab_size: self.vocab_size,
            sos: SOS,
            eos: EOS,
            mode: self.weight_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= EOS as usize {
            return Err(invalid("vocabulary must contain the special units"));
        }
        self.encoder.validate()?;
        self.attention_config().validate()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.encoder.param_specs();
        specs.extend(self.ctc_config().param_specs());
        specs.extend(self.attention_config().param_specs());
        specs
    }
}

/// Per-utterance training loss inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct UtteranceLoss {
    /// `alpha * L_ctc + (1 - alpha) * L_att`, `[1]`.
    pub loss: Var,
    pub ctc: Option<f64>,
    pub att: Option<f64>,
    /// Teacher-forced decoder argmax hits and steps (when the attention
    /// branch was evaluated).
    pub correct: usize,
    pub steps: usize,
}

impl UtteranceLoss {
    /// No CTC alignment exists for the labels.
    pub fn infeasible(&self) -> bool {
        self.ctc == Some(f64::INFINITY)
    }
}

/// Parameters together with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters drawn from the model-init stream of `seed`.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = ParamStore::init(&cfg.param_specs(), &mut rng::stream(seed, streams::MODEL_INIT));
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        params.check(&cfg.param_specs())?;
        Ok(Self { cfg, params })
    }

    fn check_features(&self, features: &Tensor) -> Result<()> {
        if features.rank() != 2 || features.last_dim() != self.cfg.encoder.input_dim {
            return Err(invalid(alloc::format!(
                "features must be [T, {}], got {:?}",
                self.cfg.encoder.input_dim,
                features.dims()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, features: &Tensor) -> Result<EncodedSequence> {
        encoder::encode(features, &self.params, &self.cfg.encoder)
    }

    /// CTC branch posteriors for already encoded frames.
    pub fn ctc_posteriors(&self, h: &EncodedSequence) -> Result<CtcPosteriors> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let hv = g.constant(h.h.clone());
        let logp = ctc::ctc_branch_graph(&mut g, hv, &p, &self.cfg.ctc_config())?;
        CtcPosteriors::from_log_probs(g.value(logp), BLANK)
    }

    pub fn decoder_session(&self, h: &EncodedSequence) -> Result<DecoderSession> {
        DecoderSession::new(h, &self.params, &self.cfg.attention_config())
    }

    /// Teacher-forced decoder hits and steps for one utterance.
    pub fn teacher_forced_accuracy(&self, features: &Tensor, labels: &[u32]) -> Result<(usize, usize)> {
        self.check_features(features)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(features.clone());
        let h = encoder::encoder_graph(&mut g, x, &p, &self.cfg.encoder)?;
        let enc = EncoderContext::new(&mut g, h, &p)?;
        let att = attention::attention_nll_graph(&mut g, &enc, labels, &p, &self.cfg.attention_config())?;
        Ok((att.correct, att.steps))
    }
}

/// Builds the joint loss of one utterance in `g`. The CTC branch is skipped
/// at `alpha == 0` and the attention branch at `alpha == 1`, so each endpoint
/// is exactly the single-branch loss.
pub fn utterance_loss(
    g: &mut Graph,
    p: &Bound,
    cfg: &ModelConfig,
    features: &Tensor,
    labels: &[u32],
    alpha: f64,
) -> Result<UtteranceLoss> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(alloc::format!("alpha {alpha} outside [0, 1]")));
    }
    let x = g.constant(features.clone());
    let h = encoder::encoder_graph(g, x, p, &cfg.encoder)?;
    let ctc_loss = if alpha > 0.0 {
        let logp = ctc::ctc_branch_graph(g, h, p, &cfg.ctc_config())?;
        Some(g.ctc_loss(logp, labels, BLANK)?)
    } else {
        None
    };
    let att = if alpha < 1.0 {
        let enc = EncoderContext::new(g, h, p)?;
        Some(attention::attention_nll_graph(g, &enc, labels, p, &cfg.attention_config())?)
    } else {
        None
    };
    let loss = crate::training::joint_loss_graph(g, ctc_loss, att.map(|a| a.nll), alpha)?;
    Ok(UtteranceLoss {
        loss,
        ctc: ctc_loss.map(|v| g.value(v).item()),
        att: att.map(|a| g.value(a.nll).item()),
        correct: att.map_or(0, |a| a.correct),
        steps: att.map_or(0, |a| a.steps),
    })
}

/// Like [`utterance_loss`] on a fresh graph with fixed parameters; returns
/// the loss value.
pub fn joint_loss_value(model: &Model, features: &Tensor, labels: &[u32], alpha: f64) -> Result<f64> {
    model.check_features(features)?;
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let l = utterance_loss(&mut g, &p, &model.cfg, features, labels, alpha)?;
    let v = g.value(l.loss).item();
    if v.is_nan() {
        return Err(Error::NonFinite("joint loss".into()));
    }
    Ok(v)
}
