use pods::metrics::{accuracy, ap_rr_p1, map_mrr_p1, ranking, recall_at_k};
use pods::pivot::{histogram, select_top_m, top_k, SelectionConfig, Strategy as Selection};
use proptest::prelude::*;

/// Zero-based rank of `i`: higher scores first, ties toward lower index.
fn rank_of(scores: &[f64], i: usize) -> usize {
    (0..scores.len())
        .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
        .count()
}

fn scored_list() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (1usize..12).prop_flat_map(|n| {
        (
            prop::collection::vec((0i32..5).prop_map(f64::from), n),
            prop::collection::vec(0u8..2, n),
            0..n,
        )
            .prop_map(|(s, mut y, forced)| {
                y[forced] = 1;
                (s, y)
            })
    })
}

proptest! {
    #[test]
    fn top_k_keeps_exactly_the_low_ranks(scores in prop::collection::vec((0i32..4).prop_map(f64::from), 0..15), k in 0usize..18) {
        let expected: Vec<usize> = (0..scores.len()).filter(|&i| rank_of(&scores, i) < k).collect();
        prop_assert_eq!(top_k(&scores, k), expected.clone());
        let cfg = SelectionConfig { strategy: Selection::Cosine, m: k, seed: 0 };
        prop_assert_eq!(select_top_m(&scores, &cfg), expected);
    }

    #[test]
    fn ranking_is_the_rank_permutation(scores in prop::collection::vec((0i32..4).prop_map(f64::from), 0..15)) {
        let order = ranking(&scores);
        for (pos, &i) in order.iter().enumerate() {
            prop_assert_eq!(rank_of(&scores, i), pos);
        }
    }

    #[test]
    fn recall_and_average_precision_match_rank_counting((scores, labels) in scored_list(), k in 1usize..12) {
        let n = scores.len();
        let ranks: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).map(|i| rank_of(&scores, i)).collect();
        let positives = ranks.len() as f64;

        let hits = ranks.iter().filter(|&&r| r < k).count() as f64;
        prop_assert_eq!(recall_at_k(&scores, &labels, n, k).unwrap(), hits / positives);

        let ap = ranks
            .iter()
            .map(|&r| ranks.iter().filter(|&&q| q <= r).count() as f64 / (r + 1) as f64)
            .sum::<f64>()
            / positives;
        let best = *ranks.iter().min().unwrap();
        let (a, rr, p1) = ap_rr_p1(&scores, &labels).unwrap();
        prop_assert!((a - ap).abs() < 1e-12);
        prop_assert_eq!(rr, 1.0 / (best + 1) as f64);
        prop_assert_eq!(p1, if best == 0 { 1.0 } else { 0.0 });
        prop_assert!((0.0..=1.0).contains(&a) && rr <= 1.0);
    }

    #[test]
    fn histogram_is_a_distribution(ts in prop::collection::vec(1usize..9, 1..40)) {
        let h = histogram(&ts).unwrap();
        prop_assert_eq!(h.len(), *ts.iter().max().unwrap());
        prop_assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (i, &p) in h.iter().enumerate() {
            let count = ts.iter().filter(|&&t| t == i + 1).count();
            prop_assert!((p - count as f64 / ts.len() as f64).abs() < 1e-15);
        }
    }
}

#[test]
fn alternating_relevance_has_map_one_half() {
    let (map, mrr, p1) = map_mrr_p1(&[(vec![4.0, 3.0, 2.0, 1.0], vec![0, 1, 0, 1])]).unwrap();
    assert_eq!((map, mrr, p1), (0.5, 0.5, 0.0));
}

#[test]
fn degenerate_inputs_are_errors() {
    assert!(recall_at_k(&[1.0, 0.0], &[0, 0], 2, 1).is_err());
    assert!(recall_at_k(&[1.0], &[1], 2, 1).is_err());
    assert!(ap_rr_p1(&[], &[]).is_err());
    assert!(map_mrr_p1(&[]).is_err());
    assert!(accuracy(&[], &[]).is_err());
    assert!(histogram(&[]).is_err());
    assert_eq!(accuracy(&[1, 2, 0], &[1, 0, 0]).unwrap(), 2.0 / 3.0);
}
