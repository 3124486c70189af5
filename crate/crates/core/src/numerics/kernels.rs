//! Forward and adjoint kernels on raw row-major buffers.
//!
//! Image tensors are NHWC. Every function here is pure; the tape in
//! `tape.rs` wires them into reverse-mode differentiation.

use super::real::{gemm, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kh) / self.stride + 1,
            (self.w + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

/// Unfolds `x` into `[n*ho*wo, kh*kw*cin]` rows, zero for padded taps.
pub fn im2col<R: Real>(g: &ConvGeom, x: &[R]) -> Vec<R> {
    let (ho, wo) = g.out_hw();
    let plen = g.patch_len();
    let mut cols = vec![R::zero(); g.n * ho * wo * plen];
    for b in 0..g.n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * plen;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let dst = row + (ky * g.kw + kx) * g.cin;
                        cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back to the image.
pub fn col2im<R: Real>(g: &ConvGeom, cols: &[R]) -> Vec<R> {
    let (ho, wo) = g.out_hw();
    let plen = g.patch_len();
    let mut dx = vec![R::zero(); g.n * g.h * g.w * g.cin];
    for b in 0..g.n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * plen;
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let src = row + (ky * g.kw + kx) * g.cin;
                        for c in 0..g.cin {
                            dx[dst + c] += cols[src + c];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `x: [n,h,w,cin]`, `w: [kh,kw,cin,cout]`, `b: [cout]` -> `[n,ho,wo,cout]`.
pub fn conv2d<R: Real>(g: &ConvGeom, x: &[R], w: &[R], b: &[R], cout: usize) -> Vec<R> {
    let (ho, wo) = g.out_hw();
    let rows = g.n * ho * wo;
    let cols = im2col(g, x);
    let mut out = vec![R::zero(); rows * cout];
    for r in 0..rows {
        out[r * cout..(r + 1) * cout].copy_from_slice(b);
    }
    gemm(rows, g.patch_len(), cout, &cols, false, w, false, &mut out, true);
    out
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward<R: Real>(
    g: &ConvGeom,
    x: &[R],
    w: &[R],
    cout: usize,
    dy: &[R],
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let (ho, wo) = g.out_hw();
    let rows = g.n * ho * wo;
    let plen = g.patch_len();
    let cols = im2col(g, x);
    let mut dw = vec![R::zero(); plen * cout];
    gemm(plen, rows, cout, &cols, true, dy, false, &mut dw, false);
    let mut db = vec![R::zero(); cout];
    for r in 0..rows {
        for (acc, v) in db.iter_mut().zip(&dy[r * cout..(r + 1) * cout]) {
            *acc += *v;
        }
    }
    let mut dcols = vec![R::zero(); rows * plen];
    gemm(rows, cout, plen, dy, false, w, true, &mut dcols, false);
    (col2im(g, &dcols), dw, db)
}

/// Depthwise convolution, stride 1. `w: [kh,kw,c]`, `b: [c]`.
pub fn depthwise_conv2d<R: Real>(g: &ConvGeom, x: &[R], w: &[R], b: &[R]) -> Vec<R> {
    let (ho, wo) = g.out_hw();
    let c = g.cin;
    let mut out = vec![R::zero(); g.n * ho * wo * c];
    for bi in 0..g.n {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = ((bi * ho + oy) * wo + ox) * c;
                out[o..o + c].copy_from_slice(b);
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((bi * g.h + iy as usize) * g.w + ix as usize) * c;
                        let wk = (ky * g.kw + kx) * c;
                        for ch in 0..c {
                            out[o + ch] += x[src + ch] * w[wk + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_conv2d_backward<R: Real>(
    g: &ConvGeom,
    x: &[R],
    w: &[R],
    dy: &[R],
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let (ho, wo) = g.out_hw();
    let c = g.cin;
    let mut dx = vec![R::zero(); x.len()];
    let mut dw = vec![R::zero(); w.len()];
    let mut db = vec![R::zero(); c];
    for bi in 0..g.n {
        for oy in 0..ho {
            for ox in 0..wo {
                let o = ((bi * ho + oy) * wo + ox) * c;
                for ch in 0..c {
                    db[ch] += dy[o + ch];
                }
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((bi * g.h + iy as usize) * g.w + ix as usize) * c;
                        let wk = (ky * g.kw + kx) * c;
                        for ch in 0..c {
                            dx[src + ch] += dy[o + ch] * w[wk + ch];
                            dw[wk + ch] += dy[o + ch] * x[src + ch];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// `x: [rows, din]`, `w: [din, dout]`, `b: [dout]`.
pub fn linear<R: Real>(rows: usize, din: usize, dout: usize, x: &[R], w: &[R], b: &[R]) -> Vec<R> {
    let mut out = vec![R::zero(); rows * dout];
    for r in 0..rows {
        out[r * dout..(r + 1) * dout].copy_from_slice(b);
    }
    gemm(rows, din, dout, x, false, w, false, &mut out, true);
    out
}

pub fn linear_backward<R: Real>(
    rows: usize,
    din: usize,
    dout: usize,
    x: &[R],
    w: &[R],
    dy: &[R],
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let mut dx = vec![R::zero(); rows * din];
    gemm(rows, dout, din, dy, false, w, true, &mut dx, false);
    let mut dw = vec![R::zero(); din * dout];
    gemm(din, rows, dout, x, true, dy, false, &mut dw, false);
    let mut db = vec![R::zero(); dout];
    for r in 0..rows {
        for (acc, v) in db.iter_mut().zip(&dy[r * dout..(r + 1) * dout]) {
            *acc += *v;
        }
    }
    (dx, dw, db)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu<R: Real>(x: R) -> R {
    let k = R::of(GELU_K);
    let a = R::of(GELU_A);
    let half = R::of(0.5);
    half * x * (R::one() + (k * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<R: Real>(x: R) -> R {
    let k = R::of(GELU_K);
    let a = R::of(GELU_A);
    let half = R::of(0.5);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    let du = k * (R::one() + R::of(3.0) * a * x * x);
    half * (R::one() + t) + half * x * (R::one() - t * t) * du
}

/// Softmax over the trailing axis of width `d`.
pub fn softmax<R: Real>(x: &[R], d: usize) -> Vec<R> {
    let mut out = vec![R::zero(); x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        softmax_row(row, o);
    }
    out
}

fn softmax_row<R: Real>(row: &[R], out: &mut [R]) {
    let max = row.iter().copied().fold(R::neg_infinity(), R::max);
    let mut sum = R::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = if v == R::neg_infinity() {
            R::zero()
        } else {
            (v - max).exp()
        };
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Adjoint of softmax given its output `y`.
pub fn softmax_backward<R: Real>(y: &[R], dy: &[R], d: usize) -> Vec<R> {
    let mut dx = vec![R::zero(); y.len()];
    for ((yr, dyr), dxr) in y.chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)) {
        let dot: R = yr.iter().zip(dyr).map(|(a, b)| *a * *b).sum();
        for i in 0..d {
            dxr[i] = yr[i] * (dyr[i] - dot);
        }
    }
    dx
}

pub fn log_softmax<R: Real>(x: &[R], d: usize) -> Vec<R> {
    let mut out = vec![R::zero(); x.len()];
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let max = row.iter().copied().fold(R::neg_infinity(), R::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<R>().ln();
        for (o, &v) in o.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

/// Adjoint of log-softmax given its output `y`.
pub fn log_softmax_backward<R: Real>(y: &[R], dy: &[R], d: usize) -> Vec<R> {
    let mut dx = vec![R::zero(); y.len()];
    for ((yr, dyr), dxr) in y.chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)) {
        let total: R = dyr.iter().copied().sum();
        for i in 0..d {
            dxr[i] = dyr[i] - yr[i].exp() * total;
        }
    }
    dx
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization over the trailing axis. Returns `(y, xhat, rstd)`.
pub fn layer_norm<R: Real>(x: &[R], gamma: &[R], beta: &[R], d: usize) -> (Vec<R>, Vec<R>, Vec<R>) {
    let rows = x.len() / d;
    let mut y = vec![R::zero(); x.len()];
    let mut xhat = vec![R::zero(); x.len()];
    let mut rstd = vec![R::zero(); rows];
    let dn = R::of(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<R>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / dn;
        let rs = R::one() / (var + R::of(LAYER_NORM_EPS)).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let xh = (row[i] - mean) * rs;
            xhat[r * d + i] = xh;
            y[r * d + i] = xh * gamma[i] + beta[i];
        }
    }
    (y, xhat, rstd)
}

pub fn layer_norm_backward<R: Real>(
    xhat: &[R],
    rstd: &[R],
    gamma: &[R],
    dy: &[R],
    d: usize,
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let rows = xhat.len() / d;
    let mut dx = vec![R::zero(); xhat.len()];
    let mut dgamma = vec![R::zero(); d];
    let mut dbeta = vec![R::zero(); d];
    let dn = R::of(d as f64);
    for r in 0..rows {
        let xh = &xhat[r * d..(r + 1) * d];
        let g = &dy[r * d..(r + 1) * d];
        let mut sum_dxh = R::zero();
        let mut sum_dxh_xh = R::zero();
        for i in 0..d {
            dgamma[i] += g[i] * xh[i];
            dbeta[i] += g[i];
            let dxh = g[i] * gamma[i];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[i];
        }
        for i in 0..d {
            let dxh = g[i] * gamma[i];
            dx[r * d + i] = rstd[r] * (dxh - sum_dxh / dn - xh[i] * sum_dxh_xh / dn);
        }
    }
    (dx, dgamma, dbeta)
}

/// Half-open cell bounds `[floor(u*n/s), floor((u+1)*n/s))`.
pub fn grid_bounds(n: usize, s: usize, u: usize) -> (usize, usize) {
    (u * n / s, (u + 1) * n / s)
}

/// Mean-pools `[n,h,w,d]` into an `s x s` grid, giving `[n,s,s,d]`.
pub fn grid_pool<R: Real>(x: &[R], n: usize, h: usize, w: usize, d: usize, s: usize) -> Vec<R> {
    let mut out = vec![R::zero(); n * s * s * d];
    for b in 0..n {
        for u in 0..s {
            let (y0, y1) = grid_bounds(h, s, u);
            for v in 0..s {
                let (x0, x1) = grid_bounds(w, s, v);
                let o = ((b * s + u) * s + v) * d;
                let cell = &mut out[o..o + d];
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let src = ((b * h + y) * w + xx) * d;
                        for (acc, val) in cell.iter_mut().zip(&x[src..src + d]) {
                            *acc += *val;
                        }
                    }
                }
                let inv = R::one() / R::of(((y1 - y0) * (x1 - x0)) as f64);
                cell.iter_mut().for_each(|v| *v *= inv);
            }
        }
    }
    out
}

pub fn grid_pool_backward<R: Real>(
    dy: &[R],
    n: usize,
    h: usize,
    w: usize,
    d: usize,
    s: usize,
) -> Vec<R> {
    let mut dx = vec![R::zero(); n * h * w * d];
    for b in 0..n {
        for u in 0..s {
            let (y0, y1) = grid_bounds(h, s, u);
            for v in 0..s {
                let (x0, x1) = grid_bounds(w, s, v);
                let o = ((b * s + u) * s + v) * d;
                let inv = R::one() / R::of(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let dst = ((b * h + y) * w + xx) * d;
                        for c in 0..d {
                            dx[dst + c] += dy[o + c] * inv;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Multi-head scaled dot-product attention without projections.
///
/// `q: [nq, dm]`, `k, v: [nk, dm]`; heads split the model width evenly.
/// Masked keys (`mask[j] == false`) receive zero weight. Returns the output
/// `[nq, dm]` and the attention weights `[heads, nq, nk]`.
pub fn attention<R: Real>(
    q: &[R],
    k: &[R],
    v: &[R],
    nq: usize,
    nk: usize,
    dm: usize,
    heads: usize,
    mask: Option<&[bool]>,
) -> (Vec<R>, Vec<R>) {
    let hd = dm / heads;
    let scale = R::one() / R::of(hd as f64).sqrt();
    let mut probs = vec![R::zero(); heads * nq * nk];
    let mut out = vec![R::zero(); nq * dm];
    let mut scores = vec![R::zero(); nk];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..nq {
            let qi = &q[i * dm + off..i * dm + off + hd];
            for j in 0..nk {
                if mask.is_some_and(|m| !m[j]) {
                    scores[j] = R::neg_infinity();
                    continue;
                }
                let kj = &k[j * dm + off..j * dm + off + hd];
                let dot: R = qi.iter().zip(kj).map(|(a, b)| *a * *b).sum();
                scores[j] = dot * scale;
            }
            let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            softmax_row(&scores, p);
            let oi = &mut out[i * dm + off..i * dm + off + hd];
            for j in 0..nk {
                let pj = p[j];
                if pj == R::zero() {
                    continue;
                }
                let vj = &v[j * dm + off..j * dm + off + hd];
                for (o, vv) in oi.iter_mut().zip(vj) {
                    *o += pj * *vv;
                }
            }
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<R: Real>(
    q: &[R],
    k: &[R],
    v: &[R],
    probs: &[R],
    dy: &[R],
    nq: usize,
    nk: usize,
    dm: usize,
    heads: usize,
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let hd = dm / heads;
    let scale = R::one() / R::of(hd as f64).sqrt();
    let mut dq = vec![R::zero(); q.len()];
    let mut dk = vec![R::zero(); k.len()];
    let mut dv = vec![R::zero(); v.len()];
    let mut dp = vec![R::zero(); nk];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..nq {
            let p = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let dyi = &dy[i * dm + off..i * dm + off + hd];
            for j in 0..nk {
                let vj = &v[j * dm + off..j * dm + off + hd];
                dp[j] = dyi.iter().zip(vj).map(|(a, b)| *a * *b).sum();
                let dvj = &mut dv[j * dm + off..j * dm + off + hd];
                for (acc, g) in dvj.iter_mut().zip(dyi) {
                    *acc += p[j] * *g;
                }
            }
            let dot: R = p.iter().zip(&dp).map(|(a, b)| *a * *b).sum();
            for j in 0..nk {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == R::zero() {
                    continue;
                }
                for t in 0..hd {
                    dq[i * dm + off + t] += ds * k[j * dm + off + t];
                    dk[j * dm + off + t] += ds * q[i * dm + off + t];
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Bilinear interpolation weights for a sample at grid coordinate
/// `(gx, gy)`, where grid point `(i, j)` sits at `(x = j, y = i)`. The
/// coordinate is clamped into the grid. Returns four `(flat_index, weight)`.
pub fn bilinear_taps(h: usize, w: usize, gx: f64, gy: f64) -> [(usize, f64); 4] {
    let gx = gx.clamp(0.0, (w - 1) as f64);
    let gy = gy.clamp(0.0, (h - 1) as f64);
    let x0 = (gx.floor() as usize).min(w.saturating_sub(2));
    let y0 = (gy.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = gx - x0 as f64;
    let fy = gy - y0 as f64;
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

/// Samples `x: [h, w, c]` at each `(gx, gy)`, giving `[points, c]`.
pub fn bilinear_sample<R: Real>(x: &[R], h: usize, w: usize, c: usize, pts: &[(f64, f64)]) -> Vec<R> {
    let mut out = vec![R::zero(); pts.len() * c];
    for (p, &(gx, gy)) in pts.iter().enumerate() {
        let o = &mut out[p * c..(p + 1) * c];
        for (idx, wt) in bilinear_taps(h, w, gx, gy) {
            if wt == 0.0 {
                continue;
            }
            let wt = R::of(wt);
            for (acc, v) in o.iter_mut().zip(&x[idx * c..(idx + 1) * c]) {
                *acc += wt * *v;
            }
        }
    }
    out
}

pub fn bilinear_sample_backward<R: Real>(
    dy: &[R],
    h: usize,
    w: usize,
    c: usize,
    pts: &[(f64, f64)],
) -> Vec<R> {
    let mut dx = vec![R::zero(); h * w * c];
    for (p, &(gx, gy)) in pts.iter().enumerate() {
        let g = &dy[p * c..(p + 1) * c];
        for (idx, wt) in bilinear_taps(h, w, gx, gy) {
            if wt == 0.0 {
                continue;
            }
            let wt = R::of(wt);
            for (acc, v) in dx[idx * c..(idx + 1) * c].iter_mut().zip(g) {
                *acc += wt * *v;
            }
        }
    }
    dx
}

/// Pixel shuffle: `[n,h,w,c*r*r] -> [n,h*r,w*r,c]`, input channel
/// `ch*r*r + i*r + j` lands at sub-pixel `(i, j)`.
pub fn depth_to_space<R: Real>(x: &[R], n: usize, h: usize, w: usize, cin: usize, r: usize) -> Vec<R> {
    let c = cin / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![R::zero(); x.len()];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let src = ((b * h + y) * w + xx) * cin;
                for ch in 0..c {
                    for i in 0..r {
                        for j in 0..r {
                            let dst = ((b * ho + y * r + i) * wo + xx * r + j) * c + ch;
                            out[dst] = x[src + ch * r * r + i * r + j];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn depth_to_space_backward<R: Real>(
    dy: &[R],
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    r: usize,
) -> Vec<R> {
    let c = cin / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut dx = vec![R::zero(); dy.len()];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let dst = ((b * h + y) * w + xx) * cin;
                for ch in 0..c {
                    for i in 0..r {
                        for j in 0..r {
                            let src = ((b * ho + y * r + i) * wo + xx * r + j) * c + ch;
                            dx[dst + ch * r * r + i * r + j] = dy[src];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<R: Real>(x: &[R], n: usize, h: usize, w: usize, c: usize, f: usize) -> Vec<R> {
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![R::zero(); n * ho * wo * c];
    for b in 0..n {
        for y in 0..ho {
            for xx in 0..wo {
                let src = ((b * h + y / f) * w + xx / f) * c;
                let dst = ((b * ho + y) * wo + xx) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

pub fn upsample_nearest_backward<R: Real>(
    dy: &[R],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    f: usize,
) -> Vec<R> {
    let (ho, wo) = (h * f, w * f);
    let mut dx = vec![R::zero(); n * h * w * c];
    for b in 0..n {
        for y in 0..ho {
            for xx in 0..wo {
                let dst = ((b * h + y / f) * w + xx / f) * c;
                let src = ((b * ho + y) * wo + xx) * c;
                for ch in 0..c {
                    dx[dst + ch] += dy[src + ch];
                }
            }
        }
    }
    dx
}
