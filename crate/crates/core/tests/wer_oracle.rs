use ctca_core::eval::{wer, wer_text};
use proptest::prelude::*;

fn naive(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = naive(ra, rb) + usize::from(x != y);
            sub.min(naive(ra, b) + 1).min(naive(a, rb) + 1)
        }
    }
}

#[test]
fn hand_examples() {
    let r = wer_text("a b c", "a x c").unwrap();
    assert_eq!((r.substitutions, r.insertions, r.deletions), (1, 0, 0));
    assert!((r.wer() - 1.0 / 3.0).abs() < 1e-15);
    let r = wer_text("a b", "").unwrap();
    assert_eq!((r.deletions, r.wer()), (2, 1.0));
    assert!(wer_text("", "a").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn edit_count_matches_naive_recursion(
        r in prop::collection::vec(0u8..4, 1..=8),
        h in prop::collection::vec(0u8..4, 0..=8),
    ) {
        let rep = wer(&r, &h).unwrap();
        prop_assert_eq!(rep.errors(), naive(&r, &h));
        prop_assert_eq!(rep.ref_words, r.len());
        // alignment arithmetic: hypothesis length = N - D + I
        prop_assert_eq!(h.len() + rep.deletions, r.len() + rep.insertions);
    }

    #[test]
    fn identical_sequences_score_zero(r in prop::collection::vec("[a-z]{1,4}", 1..10)) {
        prop_assert_eq!(wer(&r, &r).unwrap().wer(), 0.0);
    }
}
