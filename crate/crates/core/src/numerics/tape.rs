//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every value lives in a [`Tape`] node addressed by a [`Var`]. An operation
//! whose inputs all lack `requires_grad` produces a plain constant node and
//! leaves no entry to replay, so a tape built with gradients disabled is a
//! cheap forward evaluator for the very same model code.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom};
use super::real::Real;
use super::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Clone, Debug)]
enum Op<R> {
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cout: usize },
    Depthwise { x: Var, w: Var, b: Var, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Var, rows: usize, din: usize, dout: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    Scale(Var, f64),
    Square(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<R>, rstd: Vec<R> },
    GridPool { x: Var, s: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<R> },
    Bilinear { x: Var, pts: Vec<(f64, f64)> },
    DepthToSpace { x: Var, r: usize },
    Upsample { x: Var, f: usize },
    Reshape(Var),
    Sum(Var),
    MeanRows(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    Pick { x: Var, idx: Vec<usize> },
}

impl<R> Op<R> {
    fn name(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise_conv2d",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Scale(..) => "scale",
            Op::Square(..) => "square",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GridPool { .. } => "grid_pool",
            Op::Concat { .. } => "concat",
            Op::Attention { .. } => "attention",
            Op::Bilinear { .. } => "bilinear",
            Op::DepthToSpace { .. } => "depth_to_space",
            Op::Upsample { .. } => "upsample_nearest",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::MeanRows(..) => "mean_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::Pick { .. } => "pick",
        }
    }
}

struct Node<R> {
    value: Tensor<R>,
    requires_grad: bool,
    op: Option<Op<R>>,
}

/// Single-writer recording of one forward pass.
pub struct Tape<R: Real = f32> {
    id: u32,
    grad_enabled: bool,
    nodes: Vec<Node<R>>,
    entries: usize,
    recorded_values: usize,
    counters: BTreeMap<&'static str, usize>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            grad_enabled: true,
            nodes: Vec::new(),
            entries: 0,
            recorded_values: 0,
            counters: BTreeMap::new(),
        }
    }

    /// A tape on which parameters are bound as constants: pure evaluation.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Number of replayable entries recorded so far.
    pub fn entries(&self) -> usize {
        self.entries
    }

    /// Total scalar values held by replayable entries.
    pub fn recorded_values(&self) -> usize {
        self.recorded_values
    }

    /// Audit counter bump; used by callers to tag recorded sub-graphs.
    pub fn count(&mut self, key: &'static str) {
        *self.counters.entry(key).or_default() += 1;
    }

    pub fn counter(&self, key: &str) -> usize {
        self.counters.get(key).copied().unwrap_or(0)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.index()].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.index()].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, false, None)
    }

    /// Binds a trainable parameter: tracked when gradients are enabled.
    pub fn param(&mut self, value: Tensor<R>) -> Var {
        let rg = self.grad_enabled;
        self.push(value, rg, None)
    }

    fn push(&mut self, value: Tensor<R>, requires_grad: bool, op: Option<Op<R>>) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var { tape: self.id, idx }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "variable {v:?} does not belong to tape {}",
                self.id
            )));
        }
        Ok(())
    }

    fn record(&mut self, inputs: &[Var], data: Vec<R>, shape: Vec<usize>, op: Op<R>) -> Result<Var> {
        let name = op.name();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                op: name,
                shapes: inputs.iter().map(|&v| self.shape(v).to_vec()).collect(),
            });
        }
        let value = Tensor::new(shape, data)?;
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        if rg {
            self.entries += 1;
            self.recorded_values += value.numel();
            Ok(self.push(value, true, Some(op)))
        } else {
            Ok(self.push(value, false, None))
        }
    }

    fn checked(&self, vars: &[Var]) -> Result<()> {
        vars.iter().try_for_each(|&v| self.check(v))
    }

    // ---- primitives -------------------------------------------------------

    /// `x: [n,h,w,cin]`, `w: [k,k,cin,cout]`, `b: [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        self.checked(&[x, w, b])?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != xs[3] || self.shape(b) != [ws[3]] {
            return Err(Error::shape("conv2d", format!("x {xs:?}, w {ws:?}")));
        }
        if stride == 0 || xs[1] + 2 * pad < ws[0] || xs[2] + 2 * pad < ws[1] {
            return Err(Error::shape("conv2d", format!("x {xs:?} too small for kernel {ws:?}")));
        }
        let geom = ConvGeom {
            n: xs[0],
            h: xs[1],
            w: xs[2],
            cin: xs[3],
            kh: ws[0],
            kw: ws[1],
            stride,
            pad,
        };
        let cout = ws[3];
        let out = kernels::conv2d(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data(), cout);
        let (ho, wo) = geom.out_hw();
        self.record(&[x, w, b], out, vec![geom.n, ho, wo, cout], Op::Conv2d { x, w, b, geom, cout })
    }

    /// Depthwise stride-1 convolution. `w: [k,k,c]`, `b: [c]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        self.checked(&[x, w, b])?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 3 || ws[2] != xs[3] || self.shape(b) != [xs[3]] {
            return Err(Error::shape("depthwise_conv2d", format!("x {xs:?}, w {ws:?}")));
        }
        let geom = ConvGeom {
            n: xs[0],
            h: xs[1],
            w: xs[2],
            cin: xs[3],
            kh: ws[0],
            kw: ws[1],
            stride: 1,
            pad,
        };
        let out = kernels::depthwise_conv2d(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let (ho, wo) = geom.out_hw();
        self.record(&[x, w, b], out, vec![geom.n, ho, wo, xs[3]], Op::Depthwise { x, w, b, geom })
    }

    /// Dense affine map over the trailing axis: `[.., din] -> [.., dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.checked(&[x, w, b])?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != din || self.shape(b) != [ws[1]] {
            return Err(Error::shape("linear", format!("x {xs:?}, w {ws:?}")));
        }
        let dout = ws[1];
        let rows = self.value(x).numel() / din.max(1);
        let out = kernels::linear(rows, din, dout, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        self.record(&[x, w, b], out, shape, Op::Linear { x, w, b, rows, din, dout })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.checked(&[a, b])?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(R, R) -> R) -> Vec<R> {
        self.value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let shape = self.shape(a).to_vec();
        self.record(&[a, b], out, shape, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let shape = self.shape(a).to_vec();
        self.record(&[a, b], out, shape, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let shape = self.shape(a).to_vec();
        self.record(&[a, b], out, shape, Op::Mul(a, b))
    }

    /// Adds a `[d]` (or `[1,d]`) row to every row of `x: [.., d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.checked(&[x, row])?;
        let d = self.value(x).last_dim();
        if self.value(row).numel() != d {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", self.shape(x), self.shape(row))));
        }
        let r = self.value(row).data().to_vec();
        let out: Vec<R> = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|c| c.iter().zip(&r).map(|(a, b)| *a + *b).collect::<Vec<_>>())
            .collect();
        let shape = self.shape(x).to_vec();
        self.record(&[x, row], out, shape, Op::AddRow { x, row })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check(x)?;
        let k = R::of(c);
        let out = self.value(x).data().iter().map(|&v| v * k).collect();
        let shape = self.shape(x).to_vec();
        self.record(&[x], out, shape, Op::Scale(x, c))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).data().iter().map(|&v| v * v).collect();
        let shape = self.shape(x).to_vec();
        self.record(&[x], out, shape, Op::Square(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).data().iter().map(|&v| v.max(R::zero())).collect();
        let shape = self.shape(x).to_vec();
        self.record(&[x], out, shape, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.record(&[x], out, shape, Op::Gelu(x))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let d = self.value(x).last_dim();
        let out = kernels::softmax(self.value(x).data(), d);
        let shape = self.shape(x).to_vec();
        self.record(&[x], out, shape, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let d = self.value(x).last_dim();
        let out = kernels::log_softmax(self.value(x).data(), d);
        let shape = self.shape(x).to_vec();
        self.record(&[x], out, shape, Op::LogSoftmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.checked(&[x, gamma, beta])?;
        let d = self.value(x).last_dim();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape("layer_norm", format!("x {:?}, gamma {:?}", self.shape(x), self.shape(gamma))));
        }
        let (y, xhat, rstd) = kernels::layer_norm(self.value(x).data(), self.value(gamma).data(), self.value(beta).data(), d);
        let shape = self.shape(x).to_vec();
        self.record(&[x, gamma, beta], y, shape, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// `[n,h,w,d] -> [n,s,s,d]` uniform-grid mean pooling.
    pub fn grid_pool(&mut self, x: Var, s: usize) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || s == 0 || s > xs[1].min(xs[2]) {
            return Err(Error::shape("grid_pool", format!("grid {s} over {xs:?}")));
        }
        let out = kernels::grid_pool(self.value(x).data(), xs[0], xs[1], xs[2], xs[3], s);
        self.record(&[x], out, vec![xs[0], s, s, xs[3]], Op::GridPool { x, s })
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.checked(parts)?;
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter().enumerate().all(|(i, &e)| i == axis || e == base[i]);
            if !ok {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * ext..(o + 1) * ext]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.record(parts, out, shape, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// Multi-head scaled dot-product attention, `q: [nq,d]`, `k,v: [nk,d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&[bool]>) -> Result<Var> {
        self.checked(&[q, k, v])?;
        let qs = self.shape(q).to_vec();
        let ks = self.shape(k).to_vec();
        if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] || self.shape(v) != ks.as_slice() {
            return Err(Error::shape("attention", format!("q {qs:?}, k {ks:?}, v {:?}", self.shape(v))));
        }
        if heads == 0 || qs[1] % heads != 0 {
            return Err(Error::shape("attention", format!("{heads} heads over width {}", qs[1])));
        }
        if let Some(m) = mask {
            if m.len() != ks[0] || !m.iter().any(|&b| b) {
                return Err(Error::shape("attention", "mask must cover keys and keep at least one"));
            }
        }
        let (out, probs) = kernels::attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            qs[0],
            ks[0],
            qs[1],
            heads,
            mask,
        );
        self.record(&[q, k, v], out, qs, Op::Attention { q, k, v, heads, probs })
    }

    /// Bilinear samples of `x: [h,w,c]` at grid coordinates, `-> [n,c]`.
    pub fn bilinear(&mut self, x: Var, pts: &[(f64, f64)]) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[0] == 0 || xs[1] == 0 {
            return Err(Error::shape("bilinear", format!("{xs:?}")));
        }
        let out = kernels::bilinear_sample(self.value(x).data(), xs[0], xs[1], xs[2], pts);
        self.record(&[x], out, vec![pts.len(), xs[2]], Op::Bilinear { x, pts: pts.to_vec() })
    }

    pub fn depth_to_space(&mut self, x: Var, r: usize) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || r == 0 || xs[3] % (r * r) != 0 {
            return Err(Error::shape("depth_to_space", format!("{xs:?} by {r}")));
        }
        let out = kernels::depth_to_space(self.value(x).data(), xs[0], xs[1], xs[2], xs[3], r);
        let shape = vec![xs[0], xs[1] * r, xs[2] * r, xs[3] / (r * r)];
        self.record(&[x], out, shape, Op::DepthToSpace { x, r })
    }

    pub fn upsample_nearest(&mut self, x: Var, f: usize) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || f == 0 {
            return Err(Error::shape("upsample_nearest", format!("{xs:?} by {f}")));
        }
        let out = kernels::upsample_nearest(self.value(x).data(), xs[0], xs[1], xs[2], xs[3], f);
        let shape = vec![xs[0], xs[1] * f, xs[2] * f, xs[3]];
        self.record(&[x], out, shape, Op::Upsample { x, f })
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.check(x)?;
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.value(x).data().to_vec();
        self.record(&[x], out, shape, Op::Reshape(x))
    }

    /// Sum of all elements, `-> [1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).sum();
        self.record(&[x], vec![s], vec![1], Op::Sum(x))
    }

    /// Mean over rows of `[n, d]`, `-> [1, d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] == 0 {
            return Err(Error::shape("mean_rows", format!("{xs:?}")));
        }
        let (n, d) = (xs[0], xs[1]);
        let mut out = vec![R::zero(); d];
        for row in self.value(x).data().chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += *v;
            }
        }
        let inv = R::one() / R::of(n as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        self.record(&[x], out, vec![1, d], Op::MeanRows(x))
    }

    /// Row selection from `[n, d]`, `-> [idx.len(), d]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || idx.iter().any(|&i| i >= xs[0]) {
            return Err(Error::shape("gather_rows", format!("{xs:?} with indices up to {:?}", idx.iter().max())));
        }
        let d = xs[1];
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&self.value(x).data()[i * d..(i + 1) * d]);
        }
        self.record(&[x], out, vec![idx.len(), d], Op::GatherRows { x, idx: idx.to_vec() })
    }

    /// One element per row of `[n, d]`, `-> [n]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.check(x)?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || idx.len() != xs[0] || idx.iter().any(|&i| i >= xs[1]) {
            return Err(Error::shape("pick", format!("{xs:?} with {} indices", idx.len())));
        }
        let d = xs[1];
        let data = self.value(x).data();
        let out = idx.iter().enumerate().map(|(r, &i)| data[r * d + i]).collect();
        self.record(&[x], out, vec![xs[0]], Op::Pick { x, idx: idx.to_vec() })
    }

    // ---- reverse pass -----------------------------------------------------

    /// Replays adjoints from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<R>> {
        self.check(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<R>>> = vec![None; n];
        if self.requires_grad(loss) {
            grads[loss.index()] = Some(vec![R::one()]);
        }
        let mut leaf_grads: Vec<Option<Tensor<R>>> = vec![None; n];
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let Some(op) = &node.op else {
                if node.requires_grad {
                    leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                continue;
            };
            self.adjoint(op, &node.value, &g, &mut grads)?;
        }
        Ok(Gradients {
            tape: self.id,
            grads: leaf_grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn adjoint(&self, op: &Op<R>, out: &Tensor<R>, g: &[R], grads: &mut [Option<Vec<R>>]) -> Result<()> {
        let val = |v: Var| self.nodes[v.index()].value.data();
        let mut acc = |v: Var, d: Vec<R>| {
            if !self.nodes[v.index()].requires_grad {
                return;
            }
            match &mut grads[v.index()] {
                Some(existing) => existing.iter_mut().zip(d).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(d),
            }
        };
        match op {
            Op::Conv2d { x, w, b, geom, cout } => {
                let (dx, dw, db) = kernels::conv2d_backward(geom, val(*x), val(*w), *cout, g);
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::Depthwise { x, w, b, geom } => {
                let (dx, dw, db) = kernels::depthwise_conv2d_backward(geom, val(*x), val(*w), g);
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::Linear { x, w, b, rows, din, dout } => {
                let (dx, dw, db) = kernels::linear_backward(*rows, *din, *dout, val(*x), val(*w), g);
                acc(*x, dx);
                acc(*w, dw);
                acc(*b, db);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, g.iter().zip(vb).map(|(x, y)| *x * *y).collect());
                acc(*b, g.iter().zip(va).map(|(x, y)| *x * *y).collect());
            }
            Op::AddRow { x, row } => {
                let d = val(*row).len();
                let mut dr = vec![R::zero(); d];
                for c in g.chunks(d) {
                    dr.iter_mut().zip(c).for_each(|(a, b)| *a += *b);
                }
                acc(*x, g.to_vec());
                acc(*row, dr);
            }
            Op::Scale(x, c) => {
                let k = R::of(*c);
                acc(*x, g.iter().map(|&v| v * k).collect());
            }
            Op::Square(x) => {
                let two = R::of(2.0);
                acc(*x, g.iter().zip(val(*x)).map(|(a, b)| *a * two * *b).collect());
            }
            Op::Relu(x) => {
                acc(
                    *x,
                    g.iter()
                        .zip(val(*x))
                        .map(|(a, b)| if *b > R::zero() { *a } else { R::zero() })
                        .collect(),
                );
            }
            Op::Gelu(x) => {
                acc(*x, g.iter().zip(val(*x)).map(|(a, b)| *a * kernels::gelu_grad(*b)).collect());
            }
            Op::Softmax(x) => {
                acc(*x, kernels::softmax_backward(out.data(), g, out.last_dim()));
            }
            Op::LogSoftmax(x) => {
                acc(*x, kernels::log_softmax_backward(out.data(), g, out.last_dim()));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (dx, dg, db) = kernels::layer_norm_backward(xhat, rstd, val(*gamma), g, out.last_dim());
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::GridPool { x, s } => {
                let xs = self.nodes[x.index()].value.shape();
                acc(*x, kernels::grid_pool_backward(g, xs[0], xs[1], xs[2], xs[3], *s));
            }
            Op::Concat { parts, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ext = self.nodes[p.index()].value.shape()[*axis] * inner;
                    let mut d = Vec::with_capacity(outer * ext);
                    for o in 0..outer {
                        d.extend_from_slice(&g[o * total + offset..o * total + offset + ext]);
                    }
                    offset += ext;
                    acc(p, d);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let qs = self.nodes[q.index()].value.shape();
                let nk = self.nodes[k.index()].value.shape()[0];
                let (dq, dk, dv) =
                    kernels::attention_backward(val(*q), val(*k), val(*v), probs, g, qs[0], nk, qs[1], *heads);
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::Bilinear { x, pts } => {
                let xs = self.nodes[x.index()].value.shape();
                acc(*x, kernels::bilinear_sample_backward(g, xs[0], xs[1], xs[2], pts));
            }
            Op::DepthToSpace { x, r } => {
                let xs = self.nodes[x.index()].value.shape();
                acc(*x, kernels::depth_to_space_backward(g, xs[0], xs[1], xs[2], xs[3], *r));
            }
            Op::Upsample { x, f } => {
                let xs = self.nodes[x.index()].value.shape();
                acc(*x, kernels::upsample_nearest_backward(g, xs[0], xs[1], xs[2], xs[3], *f));
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Sum(x) => {
                let n = self.nodes[x.index()].value.numel();
                acc(*x, vec![g[0]; n]);
            }
            Op::MeanRows(x) => {
                let xs = self.nodes[x.index()].value.shape();
                let inv = R::one() / R::of(xs[0] as f64);
                let row: Vec<R> = g.iter().map(|&v| v * inv).collect();
                acc(*x, row.iter().copied().cycle().take(xs[0] * xs[1]).collect());
            }
            Op::GatherRows { x, idx } => {
                let xs = self.nodes[x.index()].value.shape();
                let d = xs[1];
                let mut dx = vec![R::zero(); xs[0] * d];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        dx[i * d + c] += g[r * d + c];
                    }
                }
                acc(*x, dx);
            }
            Op::Pick { x, idx } => {
                let xs = self.nodes[x.index()].value.shape();
                let d = xs[1];
                let mut dx = vec![R::zero(); xs[0] * d];
                for (r, &i) in idx.iter().enumerate() {
                    dx[r * d + i] += g[r];
                }
                acc(*x, dx);
            }
        }
        Ok(())
    }
}

/// Gradients of the tracked leaves of a consumed tape.
pub struct Gradients<R: Real = f32> {
    tape: u32,
    grads: Vec<Option<Tensor<R>>>,
    shapes: Vec<Vec<usize>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of a leaf; leaves that did not influence the loss get zeros.
    pub fn get(&self, v: Var) -> Result<Tensor<R>> {
        if v.tape != self.tape || v.index() >= self.grads.len() {
            return Err(Error::Tape(format!("variable {v:?} is not from this tape")));
        }
        Ok(self.grads[v.index()]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.index()].clone())))
    }

    /// Moves the gradient out, avoiding a copy.
    pub fn take(&mut self, v: Var) -> Result<Tensor<R>> {
        if v.tape != self.tape || v.index() >= self.grads.len() {
            return Err(Error::Tape(format!("variable {v:?} is not from this tape")));
        }
        Ok(self.grads[v.index()]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.index()].clone())))
    }
}
