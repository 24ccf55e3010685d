//! Shared encoder: a 1-d CNN over time with two max-pool-by-2 stages,
//! followed by a stack of bidirectional LSTM layers.
//!
//! LSTM cell (gate blocks laid out `[i, f, o, g]` along the columns of the
//! weight matrices):
//!
//! ```text
//! z  = x Wx + h Wh + b
//! i  = sigmoid(z_i)   f = sigmoid(z_f)   o = sigmoid(z_o)   g = tanh(z_g)
//! c' = f * c + i * g
//! h' = o * tanh(c')
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamSpec, ParamStore};
use crate::tensor::Tensor;

pub const CONV_KERNEL: usize = 3;

/// Parameter layout of one unidirectional LSTM.
#[derive(Debug, Clone)]
pub struct LstmSpec {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
}

impl LstmSpec {
    pub fn new(prefix: &str, input: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            input,
            hidden,
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let h = self.hidden;
        alloc::vec![
            ParamSpec::uniform(&format!("{}.wx", self.prefix), &[self.input, 4 * h]),
            ParamSpec::uniform(&format!("{}.wh", self.prefix), &[h, 4 * h]),
            ParamSpec::lstm_bias(&format!("{}.b", self.prefix), h),
        ]
    }
}

/// Graph handles of one LSTM's weights.
#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
}

/// Hidden and cell vectors, each `[1, H]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, hidden: usize) -> Self {
        Self {
            h: g.constant(Tensor::zeros(&[1, hidden])),
            c: g.constant(Tensor::zeros(&[1, hidden])),
        }
    }
}

fn hidden_size(g: &Graph, w: &LstmWeights) -> usize {
    g.value(w.wh).dims()[0]
}

/// Applies the gate nonlinearities to pre-activations `z` (`[1, 4H]`).
fn cell_from_gates(g: &mut Graph, z: Var, c: Var, hidden: usize) -> Result<LstmState> {
    let sig = g.slice_cols(z, 0, 3 * hidden)?;
    let sig = g.sigmoid(sig);
    let i = g.slice_cols(sig, 0, hidden)?;
    let f = g.slice_cols(sig, hidden, hidden)?;
    let o = g.slice_cols(sig, 2 * hidden, hidden)?;
    let cand = g.slice_cols(z, 3 * hidden, hidden)?;
    let cand = g.tanh(cand);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_new = g.add(keep, write)?;
    let squashed = g.tanh(c_new);
    let h_new = g.mul(o, squashed)?;
    Ok(LstmState { h: h_new, c: c_new })
}

/// One LSTM step on input `x` (`[1, in]`).
pub fn lstm_cell_step(g: &mut Graph, x: Var, state: LstmState, w: &LstmWeights) -> Result<LstmState> {
    let hidden = hidden_size(g, w);
    let zx = g.matmul(x, w.wx)?;
    let zh = g.matmul(state.h, w.wh)?;
    let z = g.add(zx, zh)?;
    let z = g.add_bias(z, w.b)?;
    cell_from_gates(g, z, state.c, hidden)
}

/// Runs an LSTM over the rows of `xs` (`[T, in]`) from zero state, in
/// reverse time order when `reverse`. Returns `[T, H]` aligned with the input
/// rows.
pub fn lstm_sequence(g: &mut Graph, xs: Var, w: &LstmWeights, reverse: bool) -> Result<Var> {
    let hidden = hidden_size(g, w);
    let t_len = g.value(xs).dims()[0];
    let proj = g.matmul(xs, w.wx)?;
    let proj = g.add_bias(proj, w.b)?;
    let mut outputs: Vec<Option<Var>> = alloc::vec![None; t_len];
    let mut state = LstmState::zeros(g, hidden);
    for step in 0..t_len {
        let t = if reverse { t_len - 1 - step } else { step };
        let zx = g.slice_rows(proj, t, 1)?;
        let z = if step == 0 {
            zx
        } else {
            let zh = g.matmul(state.h, w.wh)?;
            g.add(zx, zh)?
        };
        state = cell_from_gates(g, z, state.c, hidden)?;
        outputs[t] = Some(state.h);
    }
    let outputs: Vec<Var> = outputs.into_iter().flatten().collect();
    g.concat_rows(&outputs)
}

/// Forward and backward LSTMs over `xs`, concatenated per frame: `[T, 2H]`.
pub fn bilstm(g: &mut Graph, xs: Var, fwd: &LstmWeights, bwd: &LstmWeights) -> Result<Var> {
    let f = lstm_sequence(g, xs, fwd, false)?;
    let b = lstm_sequence(g, xs, bwd, true)?;
    g.concat_cols(&[f, b])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub cnn_layers: usize,
    pub cnn_channels: usize,
    pub bilstm_layers: usize,
    pub cells_per_direction: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 80,
            cnn_layers: 2,
            cnn_channels: 32,
            bilstm_layers: 2,
            cells_per_direction: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cnn_layers < 2 {
            return Err(invalid("encoder needs at least 2 CNN layers (one per pooling stage)"));
        }
        if self.bilstm_layers < 1 {
            return Err(invalid("encoder needs at least 1 BiLSTM layer"));
        }
        if self.input_dim == 0 || self.cnn_channels == 0 || self.cells_per_direction == 0 {
            return Err(invalid("encoder dimensions must be positive"));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        2 * self.cells_per_direction
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut c_in = self.input_dim;
        for i in 0..self.cnn_layers {
            specs.push(ParamSpec::uniform(
                &format!("enc.conv{i}.w"),
                &[CONV_KERNEL, c_in, self.cnn_channels],
            ));
            specs.push(ParamSpec::uniform(&format!("enc.conv{i}.b"), &[self.cnn_channels]));
            c_in = self.cnn_channels;
        }
        for l in 0..self.bilstm_layers {
            for dir in ["fwd", "bwd"] {
                specs.extend(
                    LstmSpec::new(&format!("enc.lstm{l}.{dir}"), c_in, self.cells_per_direction)
                        .param_specs(),
                );
            }
            c_in = self.output_dim();
        }
        specs
    }
}

/// Frame count after the two pooling stages: `ceil(ceil(T / 2) / 2)`.
pub fn downsampled_len(frames: usize) -> usize {
    frames.div_ceil(2).div_ceil(2)
}

/// Encoder output `h`, `[T', 2 * cells_per_direction]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub h: Tensor,
}

impl EncodedSequence {
    pub fn frames(&self) -> usize {
        self.h.rows()
    }
}

/// Encoder on features `x` (`[T, input_dim]`) inside a graph.
pub fn encoder_graph(g: &mut Graph, x: Var, p: &Bound, cfg: &EncoderConfig) -> Result<Var> {
    let mut x = x;
    for i in 0..cfg.cnn_layers {
        let w = p.get(&format!("enc.conv{i}.w"))?;
        let b = p.get(&format!("enc.conv{i}.b"))?;
        x = g.conv1d(x, w)?;
        x = g.add_bias(x, b)?;
        x = g.tanh(x);
        if i < 2 {
            x = g.max_pool_time(x)?;
        }
    }
    for l in 0..cfg.bilstm_layers {
        let fwd = p.lstm(&format!("enc.lstm{l}.fwd"))?;
        let bwd = p.lstm(&format!("enc.lstm{l}.bwd"))?;
        x = bilstm(g, x, &fwd, &bwd)?;
    }
    Ok(x)
}

/// Encodes one feature matrix with fixed parameters.
pub fn encode(features: &Tensor, params: &ParamStore, cfg: &EncoderConfig) -> Result<EncodedSequence> {
    cfg.validate()?;
    if features.rank() != 2 || features.last_dim() != cfg.input_dim {
        return Err(invalid(format!(
            "features must be [T, {}], got {:?}",
            cfg.input_dim,
            features.dims()
        )));
    }
    params.check_subset(&cfg.param_specs())?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(features.clone());
    let h = encoder_graph(&mut g, x, &p, cfg)?;
    Ok(EncodedSequence { h: g.value(h).clone() })
}
