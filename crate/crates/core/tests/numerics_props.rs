use ctxdet::numerics::kernels;
use ctxdet::numerics::{Tape, Tensor};
use proptest::prelude::*;

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions((rows, d, x) in (1usize..5, 1usize..9).prop_flat_map(|(r, d)| (Just(r), Just(d), vals(r * d)))) {
        let y = kernels::softmax(&x, d);
        prop_assert_eq!(y.len(), rows * d);
        for row in y.chunks(d) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn grid_pool_is_linear(
        (h, w, d, s, x, y) in (1usize..8, 1usize..8, 1usize..4)
            .prop_flat_map(|(h, w, d)| (Just(h), Just(w), Just(d), 1..=h.min(w), vals(h * w * d), vals(h * w * d))),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = kernels::grid_pool(&mix, 1, h, w, d, s);
        let px = kernels::grid_pool(&x, 1, h, w, d, s);
        let py = kernels::grid_pool(&y, 1, h, w, d, s);
        for i in 0..lhs.len() {
            prop_assert!((lhs[i] - (a * px[i] + b * py[i])).abs() <= 1e-6);
        }
    }

    #[test]
    fn attention_ignores_joint_key_value_order(
        (nq, nk, heads, hd, q, k, v) in (1usize..5, 1usize..7, 1usize..3, 1usize..4)
            .prop_flat_map(|(nq, nk, h, hd)| {
                let d = h * hd;
                (Just(nq), Just(nk), Just(h), Just(hd), vals(nq * d), vals(nk * d), vals(nk * d))
            }),
        seed in any::<u64>(),
    ) {
        use rand::{seq::SliceRandom, SeedableRng};
        let d = heads * hd;
        let mut perm: Vec<usize> = (0..nk).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let permute = |src: &[f64]| -> Vec<f64> { perm.iter().flat_map(|&i| src[i * d..(i + 1) * d].to_vec()).collect() };
        let run = |k: Vec<f64>, v: Vec<f64>| {
            let mut t = Tape::<f64>::no_grad();
            let q = t.constant(Tensor::new(vec![nq, d], q.clone()).unwrap());
            let k = t.constant(Tensor::new(vec![nk, d], k).unwrap());
            let v = t.constant(Tensor::new(vec![nk, d], v).unwrap());
            let o = t.attention(q, k, v, heads, None).unwrap();
            t.value(o).clone()
        };
        let base = run(k.clone(), v.clone());
        let moved = run(permute(&k), permute(&v));
        prop_assert!(base.max_abs_diff(&moved) <= 1e-6);
    }
}
