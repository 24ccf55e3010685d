mod common;

use common::{random_posteriors, rng};
use ctca_core::ctc::{collapse, ctc_brute_force, greedy_collapse, ctc_loss, min_frames, CtcOutcome, CtcPosteriors};
use ctca_core::gradcheck::grad_check;
use ctca_core::rng::Pcg32;
use ctca_core::Tensor;
use proptest::prelude::*;
use rand::RngExt;

fn random_labels(r: &mut Pcg32, units: usize, max_len: usize) -> Vec<u32> {
    let len = r.random_range(0..=max_len);
    (0..len).map(|_| r.random_range(1..units as u32)).collect()
}

#[test]
fn forward_matches_enumeration_on_600_instances() {
    let mut r = rng(1);
    let mut feasible = 0;
    for _ in 0..600 {
        let frames = r.random_range(1..=5);
        let units = r.random_range(2..=4);
        let q = random_posteriors(&mut r, frames, units);
        let labels = random_labels(&mut r, units, 3);
        let fwd = ctc_loss(&q, &labels).unwrap();
        let brute = ctc_brute_force(&q, &labels).unwrap();
        match (fwd, brute) {
            (CtcOutcome::Loss(a), CtcOutcome::Loss(b)) => {
                assert!((a - b).abs() <= 1e-8, "T'={frames} V={units} {labels:?}: {a} vs {b}");
                feasible += 1;
            }
            (CtcOutcome::Infeasible, CtcOutcome::Infeasible) => {
                assert!(frames < min_frames(&labels));
            }
            other => panic!("outcomes disagree: {other:?}"),
        }
    }
    assert!(feasible > 300, "only {feasible} feasible instances");
}

#[test]
fn probabilities_over_all_label_sequences_sum_to_one() {
    // every path collapses to exactly one label sequence
    let mut r = rng(2);
    for _ in 0..20 {
        let frames = r.random_range(1..=4);
        let q = random_posteriors(&mut r, frames, 3);
        let mut seqs = std::collections::BTreeSet::new();
        let total_paths = 3usize.pow(frames as u32);
        for mut code in 0..total_paths {
            let mut path = vec![0u32; frames];
            for slot in path.iter_mut() {
                *slot = (code % 3) as u32;
                code /= 3;
            }
            seqs.insert(collapse(&path, 0));
        }
        let total: f64 = seqs.iter().map(|l| (-ctc_loss(&q, l).unwrap().value()).exp()).sum();
        assert!((total - 1.0).abs() < 1e-12, "{total}");
    }
}

fn log_rows(t: &Tensor) -> Tensor {
    let v = t.last_dim();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(v) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
        row.iter_mut().for_each(|x| *x -= z);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_nonnegative_and_feasibility_is_frame_count(
        seed in any::<u64>(), frames in 1usize..7, units in 2usize..5, len in 0usize..4,
    ) {
        let mut r = rng(seed);
        let q = random_posteriors(&mut r, frames, units);
        let labels: Vec<u32> = (0..len).map(|_| r.random_range(1..units as u32)).collect();
        let out = ctc_loss(&q, &labels).unwrap();
        prop_assert_eq!(out.is_infeasible(), frames < min_frames(&labels));
        if let CtcOutcome::Loss(l) = out {
            prop_assert!(l >= -1e-12);
        }
    }

    #[test]
    fn graph_gradient_matches_finite_differences(
        seed in any::<u64>(), frames in 2usize..5, len in 1usize..3,
    ) {
        let mut r = rng(seed);
        let units = 3;
        let labels: Vec<u32> = (0..len).map(|_| r.random_range(1..units as u32)).collect();
        prop_assume!(frames >= min_frames(&labels));
        let logits = common::random_tensor(&mut r, &[frames, units], 1.0);
        let err = grad_check(
            |g, x| {
                let lp = g.log_softmax(x);
                g.ctc_loss(lp, &labels, 0)
            },
            &logits,
            1e-6,
        )
        .unwrap();
        prop_assert!(err <= 1e-6, "rel err {}", err);
    }

    #[test]
    fn graph_loss_equals_direct_loss(seed in any::<u64>(), frames in 1usize..6, len in 0usize..4) {
        let mut r = rng(seed);
        let logits = common::random_tensor(&mut r, &[frames, 4], 2.0);
        let labels: Vec<u32> = (0..len).map(|_| r.random_range(1..4u32)).collect();
        let q = CtcPosteriors::from_log_probs(&log_rows(&logits), 0).unwrap();
        let direct = ctc_loss(&q, &labels).unwrap().value();
        let mut g = ctca_core::Graph::new();
        let x = g.constant(logits);
        let lp = g.log_softmax(x);
        let l = g.ctc_loss(lp, &labels, 0).unwrap();
        let v = g.value(l).item();
        if direct.is_infinite() {
            prop_assert!(v.is_infinite());
        } else {
            prop_assert!((v - direct).abs() <= 1e-10);
        }
    }

    #[test]
    fn greedy_ignores_how_non_argmax_mass_is_arranged(
        seed in any::<u64>(), frames in 1usize..8, units in 3usize..6, shift in 1usize..4,
    ) {
        let mut r = rng(seed);
        let q = random_posteriors(&mut r, frames, units);
        let mut data = Vec::new();
        for t in 0..frames {
            let row = q.frame(t);
            let best = (0..units).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            prop_assume!(row.iter().filter(|&&v| v == row[best]).count() == 1);
            let rest: Vec<f64> = (0..units).filter(|&k| k != best).map(|k| row[k]).collect();
            let mut it = (0..rest.len()).map(|i| rest[(i + shift) % rest.len()]);
            data.extend((0..units).map(|k| if k == best { row[best] } else { it.next().unwrap() }));
        }
        let p = CtcPosteriors::new(Tensor::new(vec![frames, units], data).unwrap(), q.blank()).unwrap();
        prop_assert_eq!(greedy_collapse(&p), greedy_collapse(&q));
    }
}
