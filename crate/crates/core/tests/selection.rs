use std::collections::BTreeSet;

use fastkv::saliency::{retention_count, select_top};
use fastkv::testkit::oracle_topk;
use proptest::prelude::*;

/// Few distinct levels so ties straddle the cut often.
fn scores() -> impl Strategy<Value = Vec<f32>> {
    (1usize..=8).prop_flat_map(|levels| {
        prop::collection::vec(
            (0..levels).prop_map(move |v| v as f32 / levels as f32),
            1..=512,
        )
    })
}

fn case() -> impl Strategy<Value = (Vec<f32>, usize, usize)> {
    scores().prop_flat_map(|s| {
        let n = s.len();
        (Just(s), 0..=n + 3, 0..=n.min(32))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn matches_sort_oracle((s, budget, window) in case()) {
        let got: BTreeSet<usize> = select_top(&s, budget, window).selected_indices.into_iter().collect();
        prop_assert_eq!(got, oracle_topk(&s, budget, window));
    }

    #[test]
    fn window_always_included((s, budget, window) in case()) {
        let r = select_top(&s, budget, window);
        let n = s.len();
        for p in n - window..n {
            prop_assert!(r.selected_indices.binary_search(&p).is_ok());
        }
        prop_assert_eq!(r.window_indices, (n - window..n).collect::<Vec<_>>());
    }

    #[test]
    fn size_order_and_flags((s, budget, window) in case()) {
        let r = select_top(&s, budget, window);
        let n = s.len();
        prop_assert_eq!(r.selected_indices.len(), budget.min(n - window) + window);
        prop_assert!(r.selected_indices.windows(2).all(|p| p[0] < p[1]));
        prop_assert_eq!(r.clamped, budget > n - window);
    }

    #[test]
    fn nested_in_budget((s, budget, window) in case(), extra in 0usize..16) {
        let small = select_top(&s, budget, window).selected_indices;
        let large = select_top(&s, budget + extra, window).selected_indices;
        prop_assert!(small.iter().all(|p| large.binary_search(p).is_ok()));
    }

    #[test]
    fn invariant_under_power_of_two_scaling((s, budget, window) in case(), e in -3i32..=3) {
        let c = 2f32.powi(e);
        let scaled: Vec<f32> = s.iter().map(|v| v * c).collect();
        prop_assert_eq!(
            select_top(&s, budget, window).selected_indices,
            select_top(&scaled, budget, window).selected_indices
        );
    }

    #[test]
    fn retention_count_bounds(ctx in 1usize..5000, rate in 0.0f64..=1.0, window in 0usize..16) {
        let w = window.min(ctx);
        let k = retention_count(ctx, rate, w);
        prop_assert!(k >= w && k <= ctx);
        prop_assert!(k >= ((ctx as f64 * rate + 0.5).floor() as usize).min(ctx));
    }

    #[test]
    fn retention_count_monotone(ctx in 1usize..5000, a in 0.0f64..=1.0, b in 0.0f64..=1.0, window in 0usize..16) {
        let w = window.min(ctx);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(retention_count(ctx, lo, w) <= retention_count(ctx, hi, w));
    }
}

#[test]
fn tie_at_the_cut_prefers_lower_index() {
    let r = select_top(&[0.5, 0.5, 0.5, 0.1, 0.9], 1, 1);
    assert_eq!(r.selected_indices, vec![0, 4]);
    assert!(r.tie_break_applied);
    let clear = select_top(&[0.1, 0.7, 0.2, 0.1, 0.9], 1, 1);
    assert!(!clear.tie_break_applied);
}
