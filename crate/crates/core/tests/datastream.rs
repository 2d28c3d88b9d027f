use pam::datastream::{
    load_interactions, partition_periods, split_support_query, Interaction, ViewMode,
};
use proptest::prelude::*;

fn stream() -> impl Strategy<Value = Vec<Interaction>> {
    prop::collection::vec((1u64..40, 1u64..25, 0u8..=10), 31..600).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(t, (u, i, r))| Interaction::new(u, i, f64::from(r) / 2.0, t as u64))
            .collect()
    })
}

/// Earlier views of each interaction's item, by direct scan of the prefix.
fn brute_force_views(xs: &[Interaction], mode: ViewMode) -> Vec<u64> {
    (0..xs.len())
        .map(|k| {
            xs[..k]
                .iter()
                .filter(|y| {
                    y.item_id == xs[k].item_id && (mode == ViewMode::All || y.is_positive())
                })
                .count() as u64
        })
        .collect()
}

proptest! {
    #[test]
    fn frozen_views_match_replay(xs in stream(), all in any::<bool>()) {
        let mode = if all { ViewMode::All } else { ViewMode::Positive };
        let periods = partition_periods(&xs, 31, mode).unwrap();
        let frozen: Vec<u64> = periods.iter().flat_map(|p| p.views.iter().copied()).collect();
        prop_assert_eq!(frozen, brute_force_views(&xs, mode));
    }

    #[test]
    fn periods_are_equal_contiguous_and_deterministic(xs in stream(), p in 2usize..=31) {
        let a = partition_periods(&xs, p, ViewMode::Positive).unwrap();
        let b = partition_periods(&xs, p, ViewMode::Positive).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), p);
        let sizes: Vec<usize> = a.iter().map(|b| b.len()).collect();
        let (lo, hi) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
        prop_assert!(hi - lo <= 1);
        let flat: Vec<Interaction> = a.into_iter().flat_map(|b| b.interactions).collect();
        prop_assert_eq!(flat, xs);
    }

    #[test]
    fn support_query_partition_the_task(n in 0usize..200, ratio in 0.01f64..0.99) {
        let data: Vec<usize> = (0..n).collect();
        let (s, q) = split_support_query(&data, ratio);
        prop_assert_eq!(s.len(), ((ratio * n as f64).ceil() as usize).min(n));
        let joined: Vec<usize> = s.iter().chain(q).copied().collect();
        prop_assert_eq!(joined, data);
    }

    #[test]
    fn loading_sorts_stably_by_timestamp(rows in prop::collection::vec((1u64..9, 1u64..9, 0u64..5), 1..80)) {
        let text: String = rows.iter().map(|(u, i, t)| format!("{u}\t{i}\t4\t{t}\n")).collect();
        let xs = load_interactions(text.as_bytes()).unwrap();
        let mut expected: Vec<(u64, u64, u64)> = rows.clone();
        expected.sort_by_key(|r| r.2);
        let got: Vec<(u64, u64, u64)> = xs.iter().map(|x| (x.user_id, x.item_id, x.timestamp)).collect();
        prop_assert_eq!(got, expected);
    }
}

#[test]
fn negative_interactions_do_not_count_as_views() {
    let xs = vec![
        Interaction::new(1, 9, 5.0, 0),
        Interaction::new(2, 9, 3.0, 1),
        Interaction::new(3, 9, 4.0, 2),
        Interaction::new(4, 9, 1.0, 3),
    ];
    let p = partition_periods(&xs, 2, ViewMode::Positive).unwrap();
    assert_eq!(p[0].views, vec![0, 1]);
    assert_eq!(p[1].views, vec![1, 2]);
    let p = partition_periods(&xs, 2, ViewMode::All).unwrap();
    assert_eq!(p[1].views, vec![2, 3]);
}

#[test]
fn malformed_line_reports_its_number() {
    let err = load_interactions("1\t2\t4\t0\n1\t2\t4\n".as_bytes()).unwrap_err();
    assert!(err.to_string().starts_with("line 2"), "{err}");
}
