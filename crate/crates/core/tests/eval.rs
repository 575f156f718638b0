use proptest::prelude::*;
use urdu_parseq::eval::{aggregate, edit_distance};

/// Exponential recursion straight from the definition.
fn brute(a: &[char], b: &[char]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = brute(ra, rb) + usize::from(x != y);
            sub.min(brute(ra, b) + 1).min(brute(a, rb) + 1)
        }
    }
}

fn short_string() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!['ا', 'ب', 'پ', 'ت', 'a', 'b']), 0..=8)
        .prop_map(|v| v.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn matches_brute_force(a in short_string(), b in short_string()) {
        let (ca, cb): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        prop_assert_eq!(edit_distance(&a, &b), brute(&ca, &cb));
    }

    #[test]
    fn symmetric_and_triangular(a in short_string(), b in short_string(), c in short_string()) {
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        prop_assert_eq!(edit_distance(&a, &a), 0);
    }
}

#[test]
fn pooled_fixture() {
    let r = aggregate([("a", "abcd", "abce"), ("b", "abcdef", "abcdf")]).unwrap();
    assert_eq!(r.total_edit_ops, 2);
    assert_eq!(r.total_gt_chars, 10);
    assert_eq!(r.cer, 0.2);
    assert_eq!(r.word_accuracy, 0.0);
}

#[test]
fn self_consistent_evaluation_is_perfect() {
    let r = aggregate([("x", "سلام", "سلام"), ("y", "کتاب", "کتاب")]).unwrap();
    assert_eq!(r.cer, 0.0);
    assert_eq!(r.word_accuracy, 1.0);
}
