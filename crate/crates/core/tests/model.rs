use ctxdet::model::{ContextBlock, Detector, Integration, ModelConfig};
use ctxdet::numerics::{kernels, Binding, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn inject(det: &Detector, f: &Tensor<f32>, ctx: &Tensor<f32>, presence: &[bool]) -> Tensor<f32> {
    let mut tape = Tape::no_grad();
    let mut bind = Binding::new(&det.params);
    let f = tape.constant(f.clone());
    let c = tape.constant(ctx.clone());
    let out = det.inject(&mut tape, &mut bind, f, c, presence).unwrap();
    tape.value(out).clone()
}

#[test]
fn grid_pool_matches_rectangle_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (h, w, d, s) = (8, 8, 2, 3);
    let x: Vec<f64> = (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let pooled = kernels::grid_pool(&x, 1, h, w, d, s);
    for u in 0..s {
        for v in 0..s {
            let (y0, y1) = ((u * h) / s, ((u + 1) * h) / s);
            let (x0, x1) = ((v * w) / s, ((v + 1) * w) / s);
            for ch in 0..d {
                let mut acc = 0.0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += x[(y * w + xx) * d + ch];
                    }
                }
                let mean = acc / ((y1 - y0) * (x1 - x0)) as f64;
                assert!((pooled[(u * s + v) * d + ch] - mean).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn pooling_constant_and_identity() {
    let f = Tensor::<f64>::full(vec![6, 6, 3], 5.0);
    assert!(kernels::grid_pool(f.data(), 1, 6, 6, 3, 4).iter().all(|&v| v == 5.0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..4 * 4 * 2).map(|_| rng.random()).collect();
    assert_eq!(kernels::grid_pool(&x, 1, 4, 4, 2, 4), x);
}

#[test]
fn joint_block_permutation_leaves_injection_unchanged() {
    let det = Detector::new(ModelConfig::default(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = random(&mut rng, vec![16, 32]);
    let ctx = random(&mut rng, vec![9 * 16, 32]);
    let mut presence = vec![true; 9];
    presence[0] = false;
    presence[7] = false;
    let base = inject(&det, &f, &ctx, &presence);
    let perm = [8, 3, 5, 0, 4, 1, 7, 2, 6];
    let mut moved = Vec::new();
    let mut moved_presence = Vec::new();
    for &b in &perm {
        moved.extend_from_slice(&ctx.data()[b * 16 * 32..(b + 1) * 16 * 32]);
        moved_presence.push(presence[b]);
    }
    let moved = Tensor::new(vec![9 * 16, 32], moved).unwrap();
    let out = inject(&det, &f, &moved, &moved_presence);
    assert!(base.max_abs_diff(&out) <= 1e-6);
}

#[test]
fn single_token_context_contributes_its_value_projection() {
    let cfg = ModelConfig {
        patch_h: 16,
        patch_w: 16,
        stages: 4,
        s: 1,
        delta: 0,
        k: 0,
        residual_injection: false,
        ..Default::default()
    };
    let det = Detector::new(cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = random(&mut rng, vec![1, 32]);
    let token = random(&mut rng, vec![1, 32]);
    let out = inject(&det, &f, &token, &[true]);
    // o(v(token)) computed directly.
    let mut tape = Tape::no_grad();
    let mut bind = Binding::new(&det.params);
    let t = tape.constant(token.clone());
    let p = |n: &str| det.params.id(n).unwrap();
    let vw = bind.var(&mut tape, &det.params, p("inject.v.w"));
    let vb = bind.var(&mut tape, &det.params, p("inject.v.b"));
    let ow = bind.var(&mut tape, &det.params, p("inject.o.w"));
    let ob = bind.var(&mut tape, &det.params, p("inject.o.b"));
    let v = tape.linear(t, vw, vb).unwrap();
    let o = tape.linear(v, ow, ob).unwrap();
    assert!(out.max_abs_diff(tape.value(o)) <= 1e-6);
}

#[test]
fn injection_output_is_pinned() {
    let det = Detector::new(ModelConfig::default(), 2024).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let f = random(&mut rng, vec![16, 32]);
    let ctx = random(&mut rng, vec![9 * 16, 32]);
    let out = inject(&det, &f, &ctx, &[true; 9]);
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for v in out.data() {
        h.update(v.to_bits().to_le_bytes());
    }
    let digest = hex::encode(h.finalize());
    assert_eq!(digest, "f0ce4ff1538df0022caa33f9532953d0f4bfaeb3d0a2f7760feebc995b5779c4");
}

#[test]
fn every_integration_mode_runs_from_pixels() {
    for integration in [Integration::CrossAttn, Integration::Add, Integration::Concat] {
        let det = Detector::new(ModelConfig { integration, ..Default::default() }, 1).unwrap();
        let px = vec![120u8; 64 * 64 * 3];
        let f = det.encode_windows(&[&px]).unwrap().remove(0);
        let pooled = det.pool_features(&f);
        let tokens: Vec<f32> = (0..9).flat_map(|_| pooled.data().to_vec()).collect();
        let ctx = ContextBlock {
            tokens: Tensor::new(vec![9, 4, 4, 32], tokens).unwrap(),
            presence: vec![true; 9],
        };
        assert_eq!(det.detect_window(&f, &ctx).unwrap().len(), 16);
    }
}
