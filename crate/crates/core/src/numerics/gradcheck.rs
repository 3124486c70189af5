//! Central finite-difference checking of every tape primitive in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::tape::{Tape, Var};
use super::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Conv2d,
    DepthwiseConv2d,
    Linear,
    Relu,
    Gelu,
    Softmax,
    LogSoftmax,
    LayerNorm,
    GridPool,
    Concat,
    Attention,
    Bilinear,
    DepthToSpace,
    UpsampleNearest,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    Square,
    Sum,
    MeanRows,
    GatherRows,
    Pick,
    Reshape,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 25] = [
        PrimitiveKind::Conv2d,
        PrimitiveKind::DepthwiseConv2d,
        PrimitiveKind::Linear,
        PrimitiveKind::Relu,
        PrimitiveKind::Gelu,
        PrimitiveKind::Softmax,
        PrimitiveKind::LogSoftmax,
        PrimitiveKind::LayerNorm,
        PrimitiveKind::GridPool,
        PrimitiveKind::Concat,
        PrimitiveKind::Attention,
        PrimitiveKind::Bilinear,
        PrimitiveKind::DepthToSpace,
        PrimitiveKind::UpsampleNearest,
        PrimitiveKind::Add,
        PrimitiveKind::Sub,
        PrimitiveKind::Mul,
        PrimitiveKind::AddRow,
        PrimitiveKind::Scale,
        PrimitiveKind::Square,
        PrimitiveKind::Sum,
        PrimitiveKind::MeanRows,
        PrimitiveKind::GatherRows,
        PrimitiveKind::Pick,
        PrimitiveKind::Reshape,
    ];
}

/// A concrete primitive application to check: kind plus shapes/attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Probe {
    Conv2d { n: usize, h: usize, w: usize, cin: usize, cout: usize, k: usize, stride: usize, pad: usize },
    DepthwiseConv2d { n: usize, h: usize, w: usize, c: usize, k: usize, pad: usize },
    Linear { rows: usize, din: usize, dout: usize },
    Unary { kind: PrimitiveKind, shape: Vec<usize> },
    LayerNorm { rows: usize, d: usize },
    GridPool { n: usize, h: usize, w: usize, d: usize, s: usize },
    Concat { rows: Vec<usize>, d: usize, axis: usize },
    Attention { nq: usize, nk: usize, d: usize, heads: usize, masked: bool },
    Bilinear { h: usize, w: usize, c: usize, points: usize },
    DepthToSpace { n: usize, h: usize, w: usize, c: usize, r: usize },
    UpsampleNearest { n: usize, h: usize, w: usize, c: usize, f: usize },
    Binary { kind: PrimitiveKind, shape: Vec<usize> },
    AddRow { rows: usize, d: usize },
    MeanRows { rows: usize, d: usize },
    GatherRows { rows: usize, d: usize, picks: usize },
    Pick { rows: usize, d: usize },
}

impl Probe {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Probe::Conv2d { .. } => PrimitiveKind::Conv2d,
            Probe::DepthwiseConv2d { .. } => PrimitiveKind::DepthwiseConv2d,
            Probe::Linear { .. } => PrimitiveKind::Linear,
            Probe::Unary { kind, .. } | Probe::Binary { kind, .. } => *kind,
            Probe::LayerNorm { .. } => PrimitiveKind::LayerNorm,
            Probe::GridPool { .. } => PrimitiveKind::GridPool,
            Probe::Concat { .. } => PrimitiveKind::Concat,
            Probe::Attention { .. } => PrimitiveKind::Attention,
            Probe::Bilinear { .. } => PrimitiveKind::Bilinear,
            Probe::DepthToSpace { .. } => PrimitiveKind::DepthToSpace,
            Probe::UpsampleNearest { .. } => PrimitiveKind::UpsampleNearest,
            Probe::AddRow { .. } => PrimitiveKind::AddRow,
            Probe::MeanRows { .. } => PrimitiveKind::MeanRows,
            Probe::GatherRows { .. } => PrimitiveKind::GatherRows,
            Probe::Pick { .. } => PrimitiveKind::Pick,
        }
    }

    /// A random small instance of `kind`.
    pub fn random(kind: PrimitiveKind, rng: &mut impl Rng) -> Probe {
        use PrimitiveKind as K;
        let mut r = |lo: usize, hi: usize| rng.random_range(lo..=hi);
        match kind {
            K::Conv2d => {
                let k = r(1, 3);
                let stride = r(1, 2);
                let pad = r(0, k / 2);
                Probe::Conv2d { n: r(1, 2), h: r(k, 6), w: r(k, 6), cin: r(1, 3), cout: r(1, 3), k, stride, pad }
            }
            K::DepthwiseConv2d => {
                let k = 2 * r(0, 1) + 1;
                Probe::DepthwiseConv2d { n: r(1, 2), h: r(k, 5), w: r(k, 5), c: r(1, 3), k, pad: k / 2 }
            }
            K::Linear => Probe::Linear { rows: r(1, 4), din: r(1, 5), dout: r(1, 4) },
            K::Relu | K::Gelu | K::Softmax | K::LogSoftmax | K::Scale | K::Square | K::Sum | K::Reshape => {
                Probe::Unary { kind, shape: vec![r(1, 4), r(1, 5)] }
            }
            K::Add | K::Sub | K::Mul => Probe::Binary { kind, shape: vec![r(1, 4), r(1, 5)] },
            K::LayerNorm => Probe::LayerNorm { rows: r(1, 4), d: r(2, 6) },
            K::GridPool => {
                let h = r(1, 7);
                let w = r(1, 7);
                let s = r(1, h.min(w));
                Probe::GridPool { n: r(1, 2), h, w, d: r(1, 3), s }
            }
            K::Concat => {
                let parts = r(1, 3);
                Probe::Concat { rows: (0..parts).map(|_| r(1, 3)).collect(), d: r(1, 3), axis: r(0, 1) }
            }
            K::Attention => {
                let heads = r(1, 2);
                Probe::Attention { nq: r(1, 5), nk: r(1, 6), d: heads * r(1, 4), heads, masked: r(0, 1) == 1 }
            }
            K::Bilinear => Probe::Bilinear { h: r(1, 5), w: r(1, 5), c: r(1, 3), points: r(1, 4) },
            K::DepthToSpace => Probe::DepthToSpace { n: r(1, 2), h: r(1, 3), w: r(1, 3), c: r(1, 2), r: r(1, 2) },
            K::UpsampleNearest => Probe::UpsampleNearest { n: r(1, 2), h: r(1, 3), w: r(1, 3), c: r(1, 2), f: r(1, 3) },
            K::AddRow => Probe::AddRow { rows: r(1, 4), d: r(1, 4) },
            K::MeanRows => Probe::MeanRows { rows: r(1, 4), d: r(1, 4) },
            K::GatherRows => Probe::GatherRows { rows: r(1, 4), d: r(1, 3), picks: r(1, 5) },
            K::Pick => Probe::Pick { rows: r(1, 4), d: r(1, 4) },
        }
    }
}

/// Result of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probe: Probe,
    pub coordinates: usize,
    /// `max |analytic - numeric| / max(1, |numeric|)` over all input coordinates.
    pub max_rel_error: f64,
}

struct Instance {
    inputs: Vec<Tensor<f64>>,
    /// Integer attributes drawn once so both passes see the same problem.
    indices: Vec<usize>,
    points: Vec<(f64, f64)>,
    mask: Option<Vec<bool>>,
    projection: Option<Tensor<f64>>,
}

fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values kept away from the ReLU kink so the central difference is exact.
fn away_from_zero(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

fn build_instance(probe: &Probe, rng: &mut impl Rng) -> Instance {
    let mut indices = Vec::new();
    let mut points = Vec::new();
    let mut mask = None;
    let inputs = match probe {
        Probe::Conv2d { n, h, w, cin, cout, k, .. } => vec![
            random_tensor(rng, vec![*n, *h, *w, *cin]),
            random_tensor(rng, vec![*k, *k, *cin, *cout]),
            random_tensor(rng, vec![*cout]),
        ],
        Probe::DepthwiseConv2d { n, h, w, c, k, .. } => vec![
            random_tensor(rng, vec![*n, *h, *w, *c]),
            random_tensor(rng, vec![*k, *k, *c]),
            random_tensor(rng, vec![*c]),
        ],
        Probe::Linear { rows, din, dout } => vec![
            random_tensor(rng, vec![*rows, *din]),
            random_tensor(rng, vec![*din, *dout]),
            random_tensor(rng, vec![*dout]),
        ],
        Probe::Unary { kind, shape } => {
            if *kind == PrimitiveKind::Relu {
                vec![away_from_zero(rng, shape.clone())]
            } else {
                vec![random_tensor(rng, shape.clone())]
            }
        }
        Probe::Binary { shape, .. } => vec![random_tensor(rng, shape.clone()), random_tensor(rng, shape.clone())],
        Probe::LayerNorm { rows, d } => vec![
            random_tensor(rng, vec![*rows, *d]),
            random_tensor(rng, vec![*d]),
            random_tensor(rng, vec![*d]),
        ],
        Probe::GridPool { n, h, w, d, .. } => vec![random_tensor(rng, vec![*n, *h, *w, *d])],
        Probe::Concat { rows, d, axis } => rows
            .iter()
            .map(|&r| {
                if *axis == 0 {
                    random_tensor(rng, vec![r, *d])
                } else {
                    random_tensor(rng, vec![*d, r])
                }
            })
            .collect(),
        Probe::Attention { nq, nk, d, masked, .. } => {
            if *masked {
                let mut m: Vec<bool> = (0..*nk).map(|_| rng.random_bool(0.6)).collect();
                m[0] = true;
                mask = Some(m);
            }
            vec![
                random_tensor(rng, vec![*nq, *d]),
                random_tensor(rng, vec![*nk, *d]),
                random_tensor(rng, vec![*nk, *d]),
            ]
        }
        Probe::Bilinear { h, w, c, points: p } => {
            points = (0..*p)
                .map(|_| (rng.random_range(0.0..(*w as f64)), rng.random_range(0.0..(*h as f64))))
                .collect();
            vec![random_tensor(rng, vec![*h, *w, *c])]
        }
        Probe::DepthToSpace { n, h, w, c, r } => vec![random_tensor(rng, vec![*n, *h, *w, *c * r * r])],
        Probe::UpsampleNearest { n, h, w, c, .. } => vec![random_tensor(rng, vec![*n, *h, *w, *c])],
        Probe::AddRow { rows, d } => vec![random_tensor(rng, vec![*rows, *d]), random_tensor(rng, vec![*d])],
        Probe::MeanRows { rows, d } => vec![random_tensor(rng, vec![*rows, *d])],
        Probe::GatherRows { rows, d, picks } => {
            indices = (0..*picks).map(|_| rng.random_range(0..*rows)).collect();
            vec![random_tensor(rng, vec![*rows, *d])]
        }
        Probe::Pick { rows, d } => {
            indices = (0..*rows).map(|_| rng.random_range(0..*d)).collect();
            vec![random_tensor(rng, vec![*rows, *d])]
        }
    };
    Instance {
        inputs,
        indices,
        points,
        mask,
        projection: None,
    }
}

fn apply(probe: &Probe, inst: &Instance, tape: &mut Tape<f64>, xs: &[Var]) -> Result<Var> {
    use PrimitiveKind as K;
    match probe {
        Probe::Conv2d { stride, pad, .. } => tape.conv2d(xs[0], xs[1], xs[2], *stride, *pad),
        Probe::DepthwiseConv2d { pad, .. } => tape.depthwise_conv2d(xs[0], xs[1], xs[2], *pad),
        Probe::Linear { .. } => tape.linear(xs[0], xs[1], xs[2]),
        Probe::Unary { kind, .. } => match kind {
            K::Relu => tape.relu(xs[0]),
            K::Gelu => tape.gelu(xs[0]),
            K::Softmax => tape.softmax(xs[0]),
            K::LogSoftmax => tape.log_softmax(xs[0]),
            K::Scale => tape.scale(xs[0], -1.75),
            K::Square => tape.square(xs[0]),
            K::Sum => tape.sum(xs[0]),
            K::Reshape => {
                let n = tape.value(xs[0]).numel();
                tape.reshape(xs[0], vec![n])
            }
            other => unreachable!("{other:?} is not unary"),
        },
        Probe::Binary { kind, .. } => match kind {
            K::Add => tape.add(xs[0], xs[1]),
            K::Sub => tape.sub(xs[0], xs[1]),
            K::Mul => tape.mul(xs[0], xs[1]),
            other => unreachable!("{other:?} is not binary"),
        },
        Probe::LayerNorm { .. } => tape.layer_norm(xs[0], xs[1], xs[2]),
        Probe::GridPool { s, .. } => tape.grid_pool(xs[0], *s),
        Probe::Concat { axis, .. } => tape.concat(xs, *axis),
        Probe::Attention { heads, .. } => tape.attention(xs[0], xs[1], xs[2], *heads, inst.mask.as_deref()),
        Probe::Bilinear { .. } => tape.bilinear(xs[0], &inst.points),
        Probe::DepthToSpace { r, .. } => tape.depth_to_space(xs[0], *r),
        Probe::UpsampleNearest { f, .. } => tape.upsample_nearest(xs[0], *f),
        Probe::AddRow { .. } => tape.add_row(xs[0], xs[1]),
        Probe::MeanRows { .. } => tape.mean_rows(xs[0]),
        Probe::GatherRows { .. } => tape.gather_rows(xs[0], &inst.indices),
        Probe::Pick { .. } => tape.pick(xs[0], &inst.indices),
    }
}

/// Scalar objective `sum(op(inputs) * projection)`.
fn objective(probe: &Probe, inst: &Instance, inputs: &[Tensor<f64>], grad: bool) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut tape = if grad { Tape::<f64>::new() } else { Tape::<f64>::no_grad() };
    let xs: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
    let y = apply(probe, inst, &mut tape, &xs)?;
    let proj = inst.projection.clone().expect("projection drawn");
    let p = tape.constant(proj);
    let prod = tape.mul(y, p)?;
    let loss = tape.sum(prod)?;
    let value = tape.value(loss).data()[0];
    if !grad {
        return Ok((value, Vec::new()));
    }
    let g = tape.backward(loss)?;
    let grads = xs.iter().map(|&x| g.get(x)).collect::<Result<Vec<_>>>()?;
    Ok((value, grads))
}

/// Compares analytic input gradients of `probe` against central differences
/// with step [`FD_STEP`]. Reports; never asserts.
pub fn grad_check(probe: &Probe, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inst = build_instance(probe, &mut rng);
    // Output shape from one evaluation, then a fixed random projection.
    let out_shape = {
        let mut tape = Tape::<f64>::no_grad();
        let xs: Vec<Var> = inst.inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = apply(probe, &inst, &mut tape, &xs)?;
        tape.shape(y).to_vec()
    };
    inst.projection = Some(random_tensor(&mut rng, out_shape));
    let inputs = inst.inputs.clone();
    let (_, analytic) = objective(probe, &inst, &inputs, true)?;
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[ti].data_mut()[j] += FD_STEP;
            let mut minus = inputs.clone();
            minus[ti].data_mut()[j] -= FD_STEP;
            let (fp, _) = objective(probe, &inst, &plus, false)?;
            let (fm, _) = objective(probe, &inst, &minus, false)?;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic[ti].data()[j];
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        probe: probe.clone(),
        coordinates,
        max_rel_error: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_four_to_three() {
        let r = grad_check(&Probe::Linear { rows: 2, din: 4, dout: 3 }, 7).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn conv_single_image_kernel_three() {
        let probe = Probe::Conv2d { n: 1, h: 8, w: 8, cin: 2, cout: 2, k: 3, stride: 1, pad: 1 };
        let r = grad_check(&probe, 7).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn attention_four_queries_six_keys() {
        let probe = Probe::Attention { nq: 4, nk: 6, d: 8, heads: 2, masked: false };
        let r = grad_check(&probe, 7).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn every_kind_has_a_random_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in PrimitiveKind::ALL {
            let p = Probe::random(kind, &mut rng);
            assert_eq!(p.kind(), kind);
            let r = grad_check(&p, 1).unwrap();
            assert!(r.max_rel_error <= 1e-4, "{r:?}");
        }
    }
}
