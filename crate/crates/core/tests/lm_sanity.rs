mod common;

use common::rng;
use ctca_core::gradcheck::grad_check_params;
use ctca_core::lm::{lm_train, perplexity, sentence_nll_graph, LanguageModel, LmConfig, SgdSchedule};
use ctca_core::params::ParamStore;
use ctca_core::rng::uniform;
use proptest::prelude::*;

#[test]
fn schedule_reaches_081_after_four_epochs() {
    let s = SgdSchedule::default();
    let lrs: Vec<f64> = (0..5).map(|e| s.lr(e)).collect();
    assert_eq!(&lrs[..4], &[1.0, 1.0, 0.9, 0.9]);
    assert!((lrs[4] - 0.81).abs() < 1e-15);
}

#[test]
fn memorizes_a_single_sentence() {
    let cfg = LmConfig { vocab_size: 7, embed_dim: 8, units: 16, layers: 1 };
    let mut lm = LanguageModel::init(cfg, 3).unwrap();
    let corpus = vec![vec![4, 5, 6]];
    let schedule = SgdSchedule { epochs: 300, initial_lr: 0.25, decay: 1.0, ..SgdSchedule::default() };
    let log = lm_train(&mut lm, &corpus, &schedule, 3).unwrap();
    let ppl = perplexity(&lm, &corpus).unwrap();
    assert!(ppl <= 1.1, "memorization perplexity {ppl}");
    for w in log.windows(5) {
        assert!(w[4].loss <= w[0].loss + 1e-6, "loss rose over epochs {}..{}", w[0].epoch, w[4].epoch);
    }
}

#[test]
fn sentence_gradient_matches_finite_differences() {
    let cfg = LmConfig { vocab_size: 7, embed_dim: 3, units: 4, layers: 2 };
    let mut params = LanguageModel::init(cfg, 3).unwrap().params;
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v *= 6.0;
        }
    }
    let report = grad_check_params(|g, p| Ok(sentence_nll_graph(g, p, &cfg, &[4, 5, 6, 4])?.0), &params, 1e-6).unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn uniform_model_perplexity_is_vocab_size(
        vocab in 4usize..12,
        embed in 1usize..4,
        units in 1usize..5,
        layers in 1usize..3,
        seed in any::<u64>(),
    ) {
        let cfg = LmConfig { vocab_size: vocab, embed_dim: embed, units, layers };
        let lm = LanguageModel { cfg, params: ParamStore::zeros(&cfg.param_specs()) };
        let mut r = rng(seed);
        let corpus: Vec<Vec<u32>> = (0..4)
            .map(|_| (0..(uniform(&mut r, 0.0, 5.0) as usize)).map(|_| 3 + uniform(&mut r, 0.0, (vocab - 3) as f64) as u32).collect())
            .collect();
        let ppl = perplexity(&lm, &corpus).unwrap();
        prop_assert!((ppl - vocab as f64).abs() <= 1e-12 * vocab as f64, "{ppl} vs {vocab}");
    }

    #[test]
    fn perplexity_is_at_least_one(seed in any::<u64>(), len in 0usize..6) {
        let cfg = LmConfig { vocab_size: 6, embed_dim: 2, units: 3, layers: 1 };
        let lm = LanguageModel::init(cfg, seed).unwrap();
        let ids: Vec<u32> = (0..len).map(|i| 3 + (i % 3) as u32).collect();
        prop_assert!(perplexity(&lm, &[ids]).unwrap() >= 1.0);
    }
}
