use rand::seq::index;
use rand::Rng;

/// Splits the present entries of a neighborhood into a uniformly random
/// k-subset that back-propagates and the rest, which are encoded without
/// gradients. `k` is clamped to the number of present entries; absent entries
/// land in neither set. Both lists are sorted.
pub fn sample_context_gradients(presence: &[bool], k: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let present: Vec<usize> = (0..presence.len()).filter(|&i| presence[i]).collect();
    let k = k.min(present.len());
    let mut pick = vec![false; present.len()];
    for i in index::sample(rng, present.len(), k) {
        pick[i] = true;
    }
    let tracked = present.iter().zip(&pick).filter(|(_, &p)| p).map(|(&i, _)| i).collect();
    let detached = present.iter().zip(&pick).filter(|(_, &p)| !p).map(|(&i, _)| i).collect();
    (tracked, detached)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interior_split_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (k, t) in [(0, 0), (3, 3), (9, 9), (12, 9)] {
            let (a, b) = sample_context_gradients(&[true; 9], k, &mut rng);
            assert_eq!((a.len(), b.len()), (t, 9 - t));
        }
    }

    #[test]
    fn absent_entries_are_never_selected() {
        let presence = [false, false, false, false, true, true, false, true, true];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (a, b) = sample_context_gradients(&presence, 3, &mut rng);
            assert!(a.iter().chain(&b).all(|&i| presence[i]));
            assert_eq!(a.len() + b.len(), 4);
        }
    }

    #[test]
    fn subsets_are_roughly_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut hits = [0usize; 9];
        for _ in 0..9000 {
            for i in sample_context_gradients(&[true; 9], 3, &mut rng).0 {
                hits[i] += 1;
            }
        }
        // Each entry is expected 3000 times.
        assert!(hits.iter().all(|&h| (2800..3200).contains(&h)), "{hits:?}");
    }
}
