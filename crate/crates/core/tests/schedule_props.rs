use std::collections::HashMap;

use ctxdet::inference::{plan_causal_schedule, plan_schedule, Event};
use proptest::prelude::*;

fn positions(events: &[Event]) -> HashMap<Event, usize> {
    let mut pos = HashMap::new();
    for (i, e) in events.iter().enumerate() {
        assert!(pos.insert(*e, i).is_none(), "duplicate event {e:?}");
    }
    pos
}

proptest! {
    #[test]
    fn windows_are_encoded_and_detected_once(rows in 1usize..=12, cols in 1usize..=12, delta in 0usize..=3) {
        for sched in [plan_schedule(rows, cols, delta).unwrap(), plan_causal_schedule(rows, cols, delta).unwrap()] {
            let pos = positions(&sched.events);
            let enc = sched.events.iter().filter(|e| matches!(e, Event::Encode(..))).count();
            let det = sched.events.iter().filter(|e| matches!(e, Event::Detect(..))).count();
            prop_assert_eq!((enc, det), (rows * cols, rows * cols));
            for r in 0..rows {
                prop_assert!(pos.contains_key(&Event::EvictPooledRow(r)));
                prop_assert!(pos.contains_key(&Event::EvictFullRow(r)));
                for c in 0..cols {
                    prop_assert!(pos[&Event::Encode(r, c)] < pos[&Event::Detect(r, c)]);
                    prop_assert!(pos[&Event::Detect(r, c)] < pos[&Event::EvictFullRow(r)]);
                }
            }
        }
    }

    #[test]
    fn detect_follows_its_whole_neighborhood(rows in 1usize..=12, cols in 1usize..=12, delta in 0usize..=3) {
        let sched = plan_schedule(rows, cols, delta).unwrap();
        let pos = positions(&sched.events);
        for r in 0..rows {
            for c in 0..cols {
                let d = pos[&Event::Detect(r, c)];
                for rr in r.saturating_sub(delta)..=(r + delta).min(rows - 1) {
                    for cc in c.saturating_sub(delta)..=(c + delta).min(cols - 1) {
                        prop_assert!(pos[&Event::Encode(rr, cc)] < d);
                        prop_assert!(d < pos[&Event::EvictPooledRow(rr)]);
                    }
                }
            }
        }
    }

    #[test]
    fn residency_stays_in_the_band(rows in 1usize..=12, cols in 1usize..=12, delta in 0usize..=3) {
        let sched = plan_schedule(rows, cols, delta).unwrap();
        let (mut full, mut pooled) = (std::collections::BTreeSet::new(), std::collections::BTreeSet::new());
        let (mut peak_full, mut peak_pooled) = (0, 0);
        for e in &sched.events {
            match *e {
                Event::Encode(r, _) => {
                    full.insert(r);
                    pooled.insert(r);
                }
                Event::EvictFullRow(r) => prop_assert!(full.remove(&r)),
                Event::EvictPooledRow(r) => prop_assert!(pooled.remove(&r)),
                Event::Detect(..) => {}
            }
            peak_full = peak_full.max(full.len());
            peak_pooled = peak_pooled.max(pooled.len());
        }
        prop_assert!(full.is_empty() && pooled.is_empty());
        prop_assert!(peak_full <= (delta + 1).min(rows));
        prop_assert!(peak_pooled <= (2 * delta + 1).min(rows));
    }

    #[test]
    fn planning_is_deterministic(rows in 1usize..=12, cols in 1usize..=12, delta in 0usize..=3) {
        prop_assert_eq!(plan_schedule(rows, cols, delta).unwrap(), plan_schedule(rows, cols, delta).unwrap());
    }
}
