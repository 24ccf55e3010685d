mod common;

use common::{rng, uniform_vec};
use ctca_core::attention::{attention_weights, WeightMode};
use proptest::prelude::*;
use rand::RngExt;

fn check(e: &[f64]) -> Result<(), String> {
    let soft = attention_weights(e, WeightMode::Softmax);
    let smooth = attention_weights(e, WeightMode::Smoothed);
    for (name, w) in [("softmax", &soft), ("smoothed", &smooth)] {
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(format!("{name} sums to {s}"));
        }
    }
    for i in 0..e.len() {
        for j in 0..e.len() {
            if e[i] > e[j] {
                if !(soft[i] >= soft[j] && smooth[i] >= smooth[j]) {
                    return Err(format!("order broken at {i},{j}"));
                }
                let (rs, rm) = (soft[i] / soft[j], smooth[i] / smooth[j]);
                if rm > rs * (1.0 + 1e-12) {
                    return Err(format!("smoothed ratio {rm} exceeds softmax ratio {rs}"));
                }
            }
        }
    }
    Ok(())
}

#[test]
fn ten_thousand_random_energy_vectors() {
    let mut r = rng(3);
    for k in 0..10_000 {
        let n = r.random_range(1..=20);
        let scale = [0.1, 1.0, 5.0, 30.0][k % 4];
        let e = uniform_vec(&mut r, n, -scale, scale);
        check(&e).unwrap_or_else(|m| panic!("vector {k} {e:?}: {m}"));
    }
}

#[test]
fn single_frame_gets_all_weight() {
    assert_eq!(attention_weights(&[3.0], WeightMode::Softmax), vec![1.0]);
    assert_eq!(attention_weights(&[-40.0], WeightMode::Smoothed), vec![1.0]);
}

proptest! {
    #[test]
    fn properties_hold(e in prop::collection::vec(-50.0f64..50.0, 1..32)) {
        prop_assert!(check(&e).is_ok(), "{:?}", check(&e));
    }

    #[test]
    fn equal_energies_give_uniform_weights(v in -10.0f64..10.0, n in 1usize..16) {
        for mode in [WeightMode::Softmax, WeightMode::Smoothed] {
            let w = attention_weights(&vec![v; n], mode);
            for x in w {
                prop_assert!((x - 1.0 / n as f64).abs() < 1e-15);
            }
        }
    }
}
