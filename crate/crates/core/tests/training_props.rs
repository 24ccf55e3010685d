mod common;

use common::{rng, toy_features, toy_model_config};
use ctca_core::attention::WeightMode;
use ctca_core::model::Model;
use ctca_core::params::ParamStore;
use ctca_core::training::{next_epsilon, AdaDelta, Sequential, TrainConfig, Trainer, Utterance};
use ctca_core::Tensor;
use proptest::prelude::*;

fn dataset(seed: u64, n: usize) -> Vec<Utterance> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let frames = 9 + (i * 5) % 11;
            let labels: Vec<u32> = (0..1 + i % 2).map(|k| 4 + ((i + k) % 2) as u32).collect();
            Utterance { id: format!("u{i}"), features: toy_features(&mut r, frames), labels }
        })
        .collect()
}

fn train_cfg() -> TrainConfig {
    TrainConfig { epsilon: 1e-6, batch_size: 3, val_interval: 4, iterations: 17, ..TrainConfig::default() }
}

fn trainer(seed: u64) -> Trainer {
    let model = Model::init(toy_model_config(6, true, WeightMode::Smoothed), seed).unwrap();
    Trainer::new(model, train_cfg(), seed, dataset(1, 12), dataset(2, 4)).unwrap()
}

fn losses(t: &mut Trainer, steps: usize) -> Vec<u64> {
    (0..steps).map(|_| t.step(&Sequential).unwrap().loss.to_bits()).collect()
}

#[test]
fn same_seed_runs_are_bit_identical() {
    let (mut a, mut b) = (trainer(9), trainer(9));
    let (mut la, mut lb) = (Vec::new(), Vec::new());
    a.run(&Sequential, |r| la.push((r.loss.to_bits(), r.metrics))).unwrap();
    b.run(&Sequential, |r| lb.push((r.loss.to_bits(), r.metrics))).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.model.params, b.model.params);
    assert_ne!(trainer(10).model.params, a.model.params);
}

#[test]
fn resume_matches_uninterrupted_run() {
    for k in [3, 4, 7] {
        let mut full = trainer(5);
        let reference = losses(&mut full, k + 10);

        let mut first = trainer(5);
        let head = losses(&mut first, k);
        let state = first.state_tensors();
        drop(first);
        let mut resumed = trainer(5);
        resumed.restore(&state).unwrap();
        let tail = losses(&mut resumed, 10);

        assert_eq!(head, reference[..k]);
        assert_eq!(tail, reference[k..], "resume at {k}");
        assert_eq!(resumed.model.params, full.model.params);
        assert_eq!(resumed.opt, full.opt);
        assert_eq!(resumed.measure().unwrap(), full.measure().unwrap());
    }
}

#[test]
fn epsilon_decays_after_accuracy_drop() {
    let e = next_epsilon(1e-8, None, 0.5, 0.1);
    let e = next_epsilon(e, Some(0.5), 0.4, 0.1);
    assert!((e - 1e-9).abs() < 1e-24);
}

fn scalar(v: f64) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::new(vec![1], vec![v]).unwrap());
    p
}

proptest! {
    #[test]
    fn epsilon_counts_strict_drops(accs in prop::collection::vec(0.0f64..1.0, 1..12)) {
        let mut eps = 1e-8;
        let mut prev = None;
        let mut drops = 0;
        for &a in &accs {
            if prev.is_some_and(|p| a < p) {
                drops += 1;
            }
            eps = next_epsilon(eps, prev, a, 0.1);
            prev = Some(a);
        }
        let expect = 1e-8 * 0.1f64.powi(drops);
        prop_assert!((eps - expect).abs() <= 1e-12 * expect);
    }

    #[test]
    fn l2_shrinks_parameters_every_step(w in prop::collection::vec(-2.0f64..2.0, 1..6), l2 in 1e-3f64..0.5) {
        prop_assume!(w.iter().all(|v| v.abs() > 1e-6));
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(vec![w.len()], w.clone()).unwrap());
        let mut zero = ParamStore::new();
        zero.insert("w", Tensor::zeros(&[w.len()]));
        let mut opt = AdaDelta::new(&p, 0.95, 1e-6);
        let mut last: Vec<f64> = w.iter().map(|v| v.abs()).collect();
        for _ in 0..10 {
            opt.step(&mut p, zero.clone(), l2, 5.0).unwrap();
            let now: Vec<f64> = p.get("w").unwrap().data().iter().map(|v| v.abs()).collect();
            for (a, b) in now.iter().zip(&last) {
                prop_assert!(a < b);
            }
            last = now;
        }
    }

    #[test]
    fn first_step_matches_hand_formula(g in -10.0f64..10.0, eps in 1e-10f64..1e-4) {
        prop_assume!(g.abs() > 1e-3);
        let mut p = scalar(0.0);
        let mut opt = AdaDelta::new(&p, 0.95, eps);
        opt.step(&mut p, scalar(g), 0.0, 1e9).unwrap();
        let expect = -eps.sqrt() / (0.05 * g * g + eps).sqrt() * g;
        let got = p.get("w").unwrap().data()[0];
        prop_assert!((got - expect).abs() <= 1e-12 * expect.abs());
    }
}
