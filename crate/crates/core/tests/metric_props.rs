use std::collections::HashMap;

use lenctl::metrics::{lcs_len, length_ratio, rouge_l, rouge_n, wer, word_errors, words};
use proptest::prelude::*;

fn edit_memo(a: &[String], b: &[String], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() || b.is_empty() {
        return a.len() + b.len();
    }
    if let Some(&d) = memo.get(&(a.len(), b.len())) {
        return d;
    }
    let sub = edit_memo(&a[1..], &b[1..], memo) + usize::from(a[0] != b[0]);
    let del = edit_memo(&a[1..], b, memo) + 1;
    let ins = edit_memo(a, &b[1..], memo) + 1;
    let d = sub.min(del).min(ins);
    memo.insert((a.len(), b.len()), d);
    d
}

/// Longest common subsequence by trying every subsequence of `a`.
fn lcs_brute(a: &[String], b: &[String]) -> usize {
    let is_subseq = |s: &[&String]| {
        let mut it = b.iter();
        s.iter().all(|x| it.any(|y| y == *x))
    };
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let s: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
            is_subseq(&s).then_some(s.len())
        })
        .max()
        .unwrap_or(0)
}

fn sentence(max: usize) -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "D", "e"]), 0..=max).prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn edit_distance_matches_recursion(r in sentence(9), h in sentence(9)) {
        prop_assume!(!r.is_empty());
        let (e, n) = word_errors(&r, &h).unwrap();
        prop_assert_eq!(n, words(&r).len());
        prop_assert_eq!(e, edit_memo(&words(&r), &words(&h), &mut HashMap::new()));
    }

    #[test]
    fn lcs_matches_enumeration(a in sentence(10), b in sentence(10)) {
        let (a, b) = (words(&a), words(&b));
        prop_assert_eq!(lcs_len(&a, &b), lcs_brute(&a, &b));
        prop_assert_eq!(lcs_len(&a, &b), lcs_len(&b, &a));
    }

    #[test]
    fn self_comparison_is_perfect(r in sentence(12)) {
        prop_assume!(!r.is_empty());
        prop_assert_eq!(wer(&r, &r).unwrap(), 0.0);
        prop_assert_eq!(rouge_l(&r, &r).f1, 1.0);
        prop_assert_eq!(rouge_n(&r, &r, 1).unwrap().f1, 1.0);
        prop_assert_eq!(wer(&r, &r.to_uppercase()).unwrap(), 0.0);
    }

    #[test]
    fn scores_are_bounded(r in sentence(10), h in sentence(10)) {
        prop_assume!(!r.is_empty());
        let (rw, hw) = (words(&r), words(&h));
        let (e, _) = word_errors(&r, &h).unwrap();
        prop_assert!(e >= rw.len().abs_diff(hw.len()) && e <= rw.len().max(hw.len()));
        for p in [rouge_n(&r, &h, 1).unwrap(), rouge_n(&r, &h, 2).unwrap(), rouge_l(&r, &h)] {
            for v in [p.precision, p.recall, p.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(p.f1 <= p.precision.max(p.recall) + 1e-12);
        }
        // unigram overlap bounds the LCS from above
        let r1 = rouge_n(&r, &h, 1).unwrap();
        prop_assert!(rouge_l(&r, &h).recall <= r1.recall + 1e-12);
    }

    #[test]
    fn ratio_of_equal_lengths_is_one(lens in prop::collection::vec(1usize..50, 1..20)) {
        prop_assert_eq!(length_ratio(&lens, &lens).unwrap(), 1.0);
    }
}

#[test]
fn undefined_metrics_are_errors() {
    assert!(wer("", "a").is_err());
    assert!(rouge_n("a", "a", 3).is_err());
    assert!(length_ratio(&[1], &[0]).is_err());
    assert!(length_ratio(&[], &[]).is_err());
}
