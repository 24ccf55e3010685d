mod common;

use common::{random_tensor, rng, toy_features, toy_model_config};
use ctca_core::attention::{self, AttentionConfig, DecoderVars, EncoderContext, WeightMode};
use ctca_core::encoder::{lstm_cell_step, LstmSpec, LstmState};
use ctca_core::gradcheck::{grad_check, grad_check_params};
use ctca_core::model::{utterance_loss, Model};
use ctca_core::rng::Pcg32;
use ctca_core::{Graph, ParamStore, Result, Tensor, Var};
use proptest::prelude::*;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-4;

/// Reduces `y` to a scalar with fixed random weights so every output
/// coordinate contributes a distinct amount.
fn weighted_sum(g: &mut Graph, y: Var, r: &mut Pcg32) -> Result<Var> {
    let dims = g.value(y).dims().to_vec();
    let w = g.constant(random_tensor(r, &dims, 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn positive(r: &mut Pcg32, dims: &[usize]) -> Tensor {
    let mut t = random_tensor(r, dims, 1.0);
    t.data_mut().iter_mut().for_each(|v| *v = 1.25 + *v * 0.75);
    t
}

type Op = fn(&mut Graph, Var, &mut Pcg32) -> Result<Var>;

fn unary_ops() -> Vec<(&'static str, Vec<usize>, bool, Op)> {
    vec![
        ("tanh", vec![2, 3], false, |g, x, _| Ok(g.tanh(x))),
        ("sigmoid", vec![2, 3], false, |g, x, _| Ok(g.sigmoid(x))),
        ("exp", vec![2, 3], false, |g, x, _| Ok(g.exp(x))),
        ("log", vec![2, 3], true, |g, x, _| Ok(g.log(x))),
        ("scale", vec![2, 3], false, |g, x, _| Ok(g.scale(x, -1.7))),
        ("softmax", vec![2, 4], false, |g, x, _| Ok(g.softmax(x))),
        ("log_softmax", vec![2, 4], false, |g, x, _| Ok(g.log_softmax(x))),
        ("normalize", vec![2, 4], true, |g, x, _| Ok(g.normalize(x))),
        ("sum", vec![2, 3], false, |g, x, _| Ok(g.sum(x))),
        ("mean", vec![2, 3], false, |g, x, _| Ok(g.mean(x))),
        ("max_pool_time", vec![5, 2], false, |g, x, _| g.max_pool_time(x)),
        ("slice_cols", vec![3, 4], false, |g, x, _| g.slice_cols(x, 1, 2)),
        ("slice_rows", vec![4, 3], false, |g, x, _| g.slice_rows(x, 1, 2)),
        ("select", vec![3, 3], false, |g, x, _| g.select(x, &[0, 4, 4, 8])),
        ("gather_rows", vec![4, 3], false, |g, x, _| g.gather_rows(x, &[2, 0, 2])),
        ("reshape", vec![2, 3], false, |g, x, _| g.reshape(x, &[3, 2])),
        ("matmul_left", vec![2, 3], false, |g, x, r| {
            let b = g.constant(random_tensor(r, &[3, 4], 1.0));
            g.matmul(x, b)
        }),
        ("matmul_right", vec![3, 4], false, |g, x, r| {
            let a = g.constant(random_tensor(r, &[2, 3], 1.0));
            g.matmul(a, x)
        }),
        ("add", vec![2, 3], false, |g, x, r| {
            let b = g.constant(random_tensor(r, &[2, 3], 1.0));
            g.add(b, x)
        }),
        ("add_bias_input", vec![3, 2], false, |g, x, r| {
            let b = g.constant(random_tensor(r, &[1, 2], 1.0));
            g.add_bias(x, b)
        }),
        ("add_bias_bias", vec![1, 2], false, |g, x, r| {
            let a = g.constant(random_tensor(r, &[3, 2], 1.0));
            g.add_bias(a, x)
        }),
        ("mul", vec![2, 3], false, |g, x, r| {
            let b = g.constant(random_tensor(r, &[2, 3], 1.0));
            g.mul(x, b)
        }),
        ("square", vec![2, 3], false, |g, x, _| g.mul(x, x)),
        ("concat_cols", vec![2, 3], false, |g, x, r| {
            let b = g.constant(random_tensor(r, &[2, 1], 1.0));
            g.concat_cols(&[b, x, x])
        }),
        ("concat_rows", vec![2, 3], false, |g, x, r| {
            let b = g.constant(random_tensor(r, &[1, 3], 1.0));
            g.concat_rows(&[x, b])
        }),
        ("conv1d_input", vec![5, 2], false, |g, x, r| {
            let w = g.constant(random_tensor(r, &[3, 2, 3], 1.0));
            g.conv1d(x, w)
        }),
        ("conv1d_kernel", vec![3, 2, 3], false, |g, w, r| {
            let x = g.constant(random_tensor(r, &[5, 2], 1.0));
            g.conv1d(x, w)
        }),
        ("ctc_loss", vec![4, 3], false, |g, x, _| {
            let lp = g.log_softmax(x);
            g.ctc_loss(lp, &[1, 2], 0)
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn forward_is_pure(seed in any::<u64>()) {
        for (name, dims, pos, op) in unary_ops() {
            let run = || {
                let mut r = rng(seed);
                let point = if pos { positive(&mut r, &dims) } else { random_tensor(&mut r, &dims, 1.0) };
                let mut g = Graph::new();
                let x = g.constant(point);
                let y = op(&mut g, x, &mut r).unwrap();
                g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            };
            prop_assert_eq!(run(), run(), "{}", name);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..9, scale in 0.1f64..50.0) {
        let x = random_tensor(&mut rng(seed), &[rows, cols], scale);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.softmax(xv);
        let y = g.value(y);
        for t in 0..rows {
            let row = y.row_slice(t);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>()) {
        for (name, dims, pos, op) in unary_ops() {
            let mut r = rng(seed);
            let point = if pos { positive(&mut r, &dims) } else { random_tensor(&mut r, &dims, 1.0) };
            let wseed = seed ^ 0x5555;
            let err = grad_check(
                |g, x| {
                    let mut r = rng(wseed);
                    let y = op(g, x, &mut r)?;
                    weighted_sum(g, y, &mut r)
                },
                &point,
                EPS,
            )
            .unwrap();
            prop_assert!(err <= TOL, "{}: rel err {}", name, err);
        }
    }

    #[test]
    fn lstm_cell_matches_finite_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let spec = LstmSpec::new("cell", 3, 2);
        let params = ParamStore::init(&spec.param_specs(), &mut r);
        let x = random_tensor(&mut r, &[1, 3], 1.0);
        let (h0, c0) = (random_tensor(&mut r, &[1, 2], 1.0), random_tensor(&mut r, &[1, 2], 1.0));
        let report = grad_check_params(
            |g, p| {
                let w = p.lstm("cell")?;
                let xv = g.constant(x.clone());
                let s = LstmState { h: g.constant(h0.clone()), c: g.constant(c0.clone()) };
                let s1 = lstm_cell_step(g, xv, s, &w)?;
                let s2 = lstm_cell_step(g, xv, s1, &w)?;
                let both = g.concat_cols(&[s2.h, s2.c])?;
                let mut r = rng(seed ^ 9);
                weighted_sum(g, both, &mut r)
            },
            &params,
            EPS,
        )
        .unwrap();
        prop_assert!(report.max_rel_err <= TOL, "{:?}", report);
    }
}

fn attention_cfg(mode: WeightMode) -> AttentionConfig {
    let m = toy_model_config(5, true, mode);
    m.attention_config()
}

fn check_attention_stack(mode: WeightMode, seed: u64) -> f64 {
    let cfg = attention_cfg(mode);
    let mut r = rng(seed);
    let params = ParamStore::init(&cfg.param_specs(), &mut r);
    let h = random_tensor(&mut r, &[4, cfg.encoder_dim], 1.0);
    let report = grad_check_params(
        |g, p| {
            let hv = g.constant(h.clone());
            let enc = EncoderContext::new(g, hv, p)?;
            let s0 = DecoderVars::initial(g, &cfg, enc.frames);
            let (s1, _) = attention::attend_and_step(g, &s0, cfg.sos, &enc, p, mode)?;
            let (s2, logp) = attention::attend_and_step(g, &s1, 3, &enc, p, mode)?;
            let out = g.concat_cols(&[logp, s2.prev_weights])?;
            let mut r = rng(seed ^ 3);
            weighted_sum(g, out, &mut r)
        },
        &params,
        EPS,
    )
    .unwrap();
    report.max_rel_err
}

#[test]
fn attention_stack_gradients_both_modes() {
    for seed in 0..4 {
        for mode in [WeightMode::Softmax, WeightMode::Smoothed] {
            let err = check_attention_stack(mode, seed);
            assert!(err <= TOL, "{mode:?} seed {seed}: {err}");
        }
    }
}

#[test]
fn attention_nll_gradients() {
    for mode in [WeightMode::Softmax, WeightMode::Smoothed] {
        let cfg = attention_cfg(mode);
        let mut r = rng(21);
        let params = ParamStore::init(&cfg.param_specs(), &mut r);
        let h = random_tensor(&mut r, &[3, cfg.encoder_dim], 1.0);
        let report = grad_check_params(
            |g, p| {
                let hv = g.constant(h.clone());
                let enc = EncoderContext::new(g, hv, p)?;
                Ok(attention::attention_nll_graph(g, &enc, &[3, 4, 3], p, &cfg)?.nll)
            },
            &params,
            EPS,
        )
        .unwrap();
        assert!(report.max_rel_err <= TOL, "{mode:?}: {report:?}");
    }
}

#[test]
fn joint_loss_gradients_at_three_alphas() {
    for branch in [true, false] {
        let cfg = toy_model_config(5, branch, WeightMode::Smoothed);
        let model = Model::init(cfg, 5).unwrap();
        let mut r = rng(8);
        let x = toy_features(&mut r, 8);
        for alpha in [0.0, 0.5, 1.0] {
            let report = grad_check_params(
                |g, p| Ok(utterance_loss(g, p, &model.cfg, &x, &[3, 4], alpha)?.loss),
                &model.params,
                EPS,
            )
            .unwrap();
            assert!(report.max_rel_err <= TOL, "branch {branch} alpha {alpha}: {report:?}");
        }
    }
}
