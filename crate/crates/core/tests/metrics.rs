mod common;

use common::*;
use pase_core::eval::{edit_distance, phoneme_similarity, wer, wer_tokens, TextNormalization};
use proptest::prelude::*;

fn tokens(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..4, 0..=max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn distance_is_a_metric(a in tokens(7), b in tokens(7), c in tokens(7)) {
        let d = |x: &[u8], y: &[u8]| edit_distance(x, y).distance();
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert!(d(&a, &b) >= a.len().abs_diff(b.len()));
        prop_assert!(d(&a, &b) <= a.len().max(b.len()));
    }

    #[test]
    fn matches_exhaustive_oracle_on_longer_pairs(a in tokens(8), b in tokens(8)) {
        let want = exhaustive_alignment(&a, &b, &all_matchings(a.len(), b.len()));
        prop_assert_eq!(edit_distance(&a, &b), want);
    }

    #[test]
    fn counts_are_consistent(a in tokens(10), b in tokens(10)) {
        let c = edit_distance(&a, &b);
        prop_assert_eq!(c.substitutions + c.deletions + c.equals, a.len());
        prop_assert_eq!(c.substitutions + c.insertions + c.equals, b.len());
    }

    #[test]
    fn wer_is_invariant_to_relabelling(a in prop::collection::vec(0u8..5, 1..10), b in tokens(10), shift in 1u8..200) {
        // Any injective renaming of the vocabulary leaves the score unchanged.
        let rename = |v: &[u8]| v.iter().map(|&t| format!("w{}", t as u32 * 7 + shift as u32)).collect::<Vec<_>>();
        let plain = wer_tokens(&a, &b).unwrap();
        prop_assert_eq!(plain, wer_tokens(&rename(&a), &rename(&b)).unwrap());
        let joined = |v: Vec<String>| v.join(" ");
        prop_assert_eq!(plain, wer(&joined(rename(&a)), &joined(rename(&b))).unwrap());
    }

    #[test]
    fn phoneme_similarity_is_bounded(a in tokens(8), b in tokens(8)) {
        let s = phoneme_similarity(&a, &b);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(s == 1.0, a == b);
    }
}

#[test]
fn exhaustive_small_alphabet() {
    let seqs = all_sequences(2, 5);
    for a in &seqs {
        for b in &seqs {
            assert_eq!(
                edit_distance(a, b),
                exhaustive_alignment(a, b, &all_matchings(a.len(), b.len())),
                "{a:?} / {b:?}"
            );
        }
    }
}

#[test]
fn normalisation_feeds_wer() {
    let n = TextNormalization::default();
    assert_eq!(n.tokens("It's  FINE, isn't it?"), ["it's", "fine", "isn't", "it"]);
    assert_eq!(wer("It's fine.", "its fine").unwrap(), 50.0);
    let strict = TextNormalization { lowercase: false, ..TextNormalization::default() };
    assert_eq!(pase_core::eval::wer_with("A b", "a b", &strict).unwrap(), 50.0);
}
