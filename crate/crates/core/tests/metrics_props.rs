use ctxdet::metrics::{f1_scores, match_detections, match_points, EvalConfig, MatchRule, Point};
use ctxdet::training::hungarian;
use proptest::prelude::*;

fn points(max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((0.0f64..64.0, 0.0f64..64.0, 0usize..3), 0..max)
        .prop_map(|v| v.into_iter().map(|(x, y, c)| Point::new(x, y, c)).collect())
}

fn config(rule: MatchRule) -> EvalConfig {
    EvalConfig {
        rule,
        ..EvalConfig::default()
    }
}

proptest! {
    #[test]
    fn counts_balance_against_both_sides(preds in points(20), gts in points(20), optimal in any::<bool>()) {
        let rule = if optimal { MatchRule::Optimal } else { MatchRule::Greedy };
        let a = match_detections(&preds, &gts, &config(rule)).unwrap();
        for (c, k) in a.per_category.iter().enumerate() {
            prop_assert_eq!(k.tp + k.fn_, gts.iter().filter(|g| g.category == c).count());
            prop_assert_eq!(k.tp + k.fp, preds.iter().filter(|p| p.category == c).count());
        }
        let s = f1_scores(&a, config(rule).empty);
        for k in &s.per_category {
            if let Some(f) = k.f1 {
                prop_assert!((0.0..=1.0).contains(&f));
            }
        }
    }

    #[test]
    fn relabeling_predictions_keeps_counts(preds in points(16), gts in points(16), seed in any::<u64>()) {
        let mut shuffled = preds.clone();
        let n = shuffled.len();
        let mut state = seed;
        for i in (1..n).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (state >> 33) as usize % (i + 1));
        }
        for rule in [MatchRule::Greedy, MatchRule::Optimal] {
            let a = match_detections(&preds, &gts, &config(rule)).unwrap();
            let b = match_detections(&shuffled, &gts, &config(rule)).unwrap();
            prop_assert_eq!(a.per_category, b.per_category);
        }
    }

    #[test]
    fn matchings_are_one_to_one_within_radius(preds in points(16), gts in points(16)) {
        for rule in [MatchRule::Greedy, MatchRule::Optimal] {
            let pairs = match_points(&preds, &gts, 6.0, rule).unwrap();
            let mut p: Vec<_> = pairs.iter().map(|x| x.0).collect();
            let mut g: Vec<_> = pairs.iter().map(|x| x.1).collect();
            p.sort_unstable();
            p.dedup();
            g.sort_unstable();
            g.dedup();
            prop_assert_eq!((p.len(), g.len()), (pairs.len(), pairs.len()));
            for &(i, j) in &pairs {
                prop_assert!(preds[i].dist(&gts[j]) <= 6.0);
            }
        }
    }

    #[test]
    fn greedy_equals_optimal_on_disjoint_candidates(n in 0usize..8, jitter in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 8)) {
        // Pairs 20 px apart with a 6 px radius never share candidates.
        let gts: Vec<Point> = (0..n).map(|i| Point::new(20.0 * i as f64, 10.0, 0)).collect();
        let preds: Vec<Point> = gts.iter().zip(&jitter).map(|(g, j)| Point::new(g.x + j.0, g.y + j.1, 0)).collect();
        let a = match_points(&preds, &gts, 6.0, MatchRule::Greedy).unwrap();
        let b = match_points(&preds, &gts, 6.0, MatchRule::Optimal).unwrap();
        prop_assert_eq!(a.len(), n);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn hungarian_covers_the_short_side(
        (rows, cols, cost) in (1usize..7, 1usize..7)
            .prop_flat_map(|(r, c)| (Just(r), Just(c), prop::collection::vec(prop::collection::vec(0.0f64..10.0, c), r)))
    ) {
        let a = hungarian(&cost).unwrap();
        prop_assert_eq!(a.pairs.len(), rows.min(cols));
        prop_assert_eq!(a.unmatched_rows.len() + a.pairs.len(), rows);
        prop_assert_eq!(a.unmatched_cols.len() + a.pairs.len(), cols);
        // No single swap of two assigned columns lowers the total.
        for x in 0..a.pairs.len() {
            for y in x + 1..a.pairs.len() {
                let ((r1, c1), (r2, c2)) = (a.pairs[x], a.pairs[y]);
                prop_assert!(cost[r1][c1] + cost[r2][c2] <= cost[r1][c2] + cost[r2][c1] + 1e-9);
            }
        }
    }
}
