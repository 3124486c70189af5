use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{kernels, Binding, ParamId, ParamStore, Tape, Tensor, Var};

use super::config::{Integration, ModelConfig};

/// `s x s x d` pooled features of one neighborhood entry.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledContext {
    pub tokens: Tensor<f32>,
    /// Grid position, which may lie outside the slide for absent entries.
    pub source: (i64, i64),
    pub present: bool,
}

/// `(2δ+1)² x s x s x d` context in row-major `(j,k)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextBlock {
    pub tokens: Tensor<f32>,
    pub presence: Vec<bool>,
}

impl ContextBlock {
    pub fn blocks(&self) -> usize {
        self.presence.len()
    }

    /// Per-token presence, `s*s` copies of each block flag.
    pub fn token_mask(&self) -> Vec<bool> {
        let per = self.tokens.numel() / self.tokens.last_dim().max(1) / self.blocks().max(1);
        self.presence.iter().flat_map(|&p| std::iter::repeat_n(p, per)).collect()
    }
}

/// Stacks pooled entries into a block, zeroing absent ones. Entries must be
/// the full neighborhood of their center in row-major order.
pub fn assemble_context(pooled: &[PooledContext], delta: usize) -> Result<ContextBlock> {
    let side = 2 * delta + 1;
    if pooled.len() != side * side {
        return Err(Error::shape("assemble_context", format!("{} entries for delta {delta}", pooled.len())));
    }
    let center = pooled[side * delta + delta].source;
    if !pooled[side * delta + delta].present {
        return Err(Error::shape("assemble_context", "center entry must be present"));
    }
    let shape = pooled[0].tokens.shape().to_vec();
    let mut data = Vec::with_capacity(pooled.len() * pooled[0].tokens.numel());
    for (i, p) in pooled.iter().enumerate() {
        let want = (center.0 + (i / side) as i64 - delta as i64, center.1 + (i % side) as i64 - delta as i64);
        if p.source != want {
            return Err(Error::shape("assemble_context", format!("entry {i} comes from {:?}, expected {want:?}", p.source)));
        }
        if p.tokens.shape() != shape.as_slice() {
            return Err(Error::shape("assemble_context", format!("{:?} vs {shape:?}", p.tokens.shape())));
        }
        if p.present {
            data.extend_from_slice(p.tokens.data());
        } else {
            data.extend(std::iter::repeat_n(0.0, p.tokens.numel()));
        }
    }
    let mut full = vec![pooled.len()];
    full.extend(shape);
    Ok(ContextBlock {
        tokens: Tensor::new(full, data)?,
        presence: pooled.iter().map(|p| p.present).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub index: usize,
    pub anchor: (f32, f32),
    pub offset: (f32, f32),
    /// `C+1` logits, background last.
    pub logits: Vec<f32>,
    pub embedding: Vec<f32>,
}

impl Proposal {
    pub fn point(&self) -> (f32, f32) {
        (self.anchor.0 + self.offset.0, self.anchor.1 + self.offset.1)
    }

    pub fn foreground(&self) -> f32 {
        foreground_score(&self.logits)
    }

    /// Most likely nucleus category according to φ.
    pub fn category(&self) -> usize {
        argmax(&self.logits[..self.logits.len() - 1])
    }
}

pub fn foreground_score(logits: &[f32]) -> f32 {
    1.0 - kernels::softmax(logits, logits.len())[logits.len() - 1]
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Decoder outputs for one window: `offsets [P,2]` in pixels, `logits [P,C+1]`,
/// `embed [P,d]`.
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    pub offsets: Var,
    pub logits: Var,
    pub embed: Var,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    enc: Vec<Dense>,
    q: Option<Dense>,
    k: Option<Dense>,
    v: Option<Dense>,
    o: Option<Dense>,
    mix: Option<Dense>,
    ln: Dense,
    trunk_conv: Dense,
    trunk: Dense,
    reg: Dense,
    cls: Dense,
}

/// The context-aware point detector (encoder, injection, decoder and φ).
#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
}

fn dense(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, din: usize, dout: usize) -> Result<Dense> {
    Ok(Dense {
        w: store.insert(format!("{name}.w"), ParamStore::xavier(rng, din, dout))?,
        b: store.insert(format!("{name}.b"), Tensor::zeros(vec![dout]))?,
    })
}

fn conv(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, k: usize, cin: usize, cout: usize) -> Result<Dense> {
    Ok(Dense {
        w: store.insert(format!("{name}.w"), ParamStore::conv_normal(rng, [k, k, cin, cout]))?,
        b: store.insert(format!("{name}.b"), Tensor::zeros(vec![cout]))?,
    })
}

impl Detector {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let ch = cfg.encoder_channels();
        let enc = (0..cfg.stages)
            .map(|i| conv(&mut p, &mut rng, &format!("enc.{i}"), 3, ch[i], ch[i + 1]))
            .collect::<Result<Vec<_>>>()?;
        let d = cfg.d;
        let attn = cfg.integration == Integration::CrossAttn;
        let mut opt = |name: &str, on: bool, din: usize, p: &mut ParamStore| -> Result<Option<Dense>> {
            if on {
                dense(p, &mut rng, name, din, d).map(Some)
            } else {
                Ok(None)
            }
        };
        let q = opt("inject.q", attn, d, &mut p)?;
        let k = opt("inject.k", attn, d, &mut p)?;
        let v = opt("inject.v", attn, d, &mut p)?;
        let o = opt("inject.o", attn, d, &mut p)?;
        let mix = opt("inject.mix", cfg.integration == Integration::Concat, d * (cfg.blocks() + 1), &mut p)?;
        let ln = Dense {
            w: p.insert("inject.ln.gamma", Tensor::full(vec![d], 1.0))?,
            b: p.insert("inject.ln.beta", Tensor::zeros(vec![d]))?,
        };
        let trunk_conv = conv(&mut p, &mut rng, "dec.conv", 3, d, d)?;
        let trunk = dense(&mut p, &mut rng, "dec.trunk", d, d * cfg.anchors)?;
        let reg = dense(&mut p, &mut rng, "dec.reg", d, 2)?;
        let cls = dense(&mut p, &mut rng, "dec.phi", d, cfg.categories + 1)?;
        Ok(Detector {
            cfg,
            params: p,
            ids: Ids {
                enc,
                q,
                k,
                v,
                o,
                mix,
                ln,
                trunk_conv,
                trunk,
                reg,
                cls,
            },
        })
    }

    /// Rebuilds a detector around stored weights, checking every parameter.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        let fresh = Detector::new(cfg.clone(), 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("{} tensors, model expects {}", params.len(), fresh.params.len()),
            });
        }
        for id in fresh.params.ids() {
            let name = fresh.params.name(id);
            let got = params.id(name).map(|j| params.get(j).shape());
            if got != Some(fresh.params.get(id).shape()) || params.id(name) != Some(id) {
                return Err(Error::Format {
                    what: "checkpoint",
                    detail: format!("parameter {name} missing, misplaced or misshapen"),
                });
            }
        }
        Ok(Detector {
            cfg,
            params,
            ids: fresh.ids,
        })
    }

    /// Writes the weights to `path` and the config to `path` with a `.json` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)?;
        let side = path.with_extension("json");
        std::fs::write(&side, serde_json::to_vec_pretty(&self.cfg)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = path.with_extension("json");
        let bytes = std::fs::read(&side).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing {
                what: "model config sidecar",
                path: side.clone(),
            },
            _ => Error::io(&side, e),
        })?;
        let cfg: ModelConfig = serde_json::from_slice(&bytes)?;
        Detector::from_params(cfg, ParamStore::load(path)?)
    }

    fn bind(&self, tape: &mut Tape<f32>, bind: &mut Binding, d: Dense) -> (Var, Var) {
        (bind.var(tape, &self.params, d.w), bind.var(tape, &self.params, d.b))
    }

    /// `[n,H,W,3]` pixels to `[n,h,w,d]` features.
    pub fn encode(&self, tape: &mut Tape<f32>, bind: &mut Binding, x: Var) -> Result<Var> {
        let n = tape.shape(x)[0];
        for _ in 0..n {
            tape.count("encode");
        }
        let mut h = x;
        for &layer in &self.ids.enc {
            let (w, b) = self.bind(tape, bind, layer);
            let c = tape.conv2d(h, w, b, 2, 1)?;
            h = tape.gelu(c)?;
        }
        Ok(h)
    }

    /// `[n,h,w,d] -> [n,s,s,d]`.
    pub fn pool(&self, tape: &mut Tape<f32>, f: Var) -> Result<Var> {
        tape.count("grid_pool");
        tape.grid_pool(f, self.cfg.s)
    }

    /// Fuses query features `f: [h*w,d]` with context tokens `ctx: [B*s*s,d]`.
    pub fn inject(&self, tape: &mut Tape<f32>, bind: &mut Binding, f: Var, ctx: Var, presence: &[bool]) -> Result<Var> {
        let cfg = &self.cfg;
        let d = cfg.d;
        if tape.shape(f).last() != Some(&d) || tape.shape(ctx).last() != Some(&d) {
            return Err(Error::shape("inject_context", format!("f {:?}, ctx {:?}", tape.shape(f), tape.shape(ctx))));
        }
        let blocks = presence.len();
        let per = cfg.s * cfg.s;
        if tape.shape(ctx)[0] != blocks * per {
            return Err(Error::shape("inject_context", format!("{:?} tokens for {blocks} blocks", tape.shape(ctx))));
        }
        tape.count("inject");
        let (gamma, beta) = self.bind(tape, bind, self.ids.ln);
        match cfg.integration {
            Integration::CrossAttn => {
                let proj = |tape: &mut Tape<f32>, bind: &mut Binding, p: Option<Dense>, x: Var| -> Result<Var> {
                    let (w, b) = self.bind(tape, bind, p.expect("attention weights exist in cross-attention mode"));
                    tape.linear(x, w, b)
                };
                let q = proj(tape, bind, self.ids.q, f)?;
                let k = proj(tape, bind, self.ids.k, ctx)?;
                let v = proj(tape, bind, self.ids.v, ctx)?;
                let mask: Vec<bool> = presence.iter().flat_map(|&p| std::iter::repeat_n(p, per)).collect();
                let a = tape.attention(q, k, v, cfg.heads, cfg.mask_absent.then_some(mask.as_slice()))?;
                let out = proj(tape, bind, self.ids.o, a)?;
                if cfg.residual_injection {
                    let sum = tape.add(f, out)?;
                    tape.layer_norm(sum, gamma, beta)
                } else {
                    Ok(out)
                }
            }
            Integration::Add => {
                let rows: Vec<usize> = (0..blocks * per).filter(|i| presence[i / per]).collect();
                let present = tape.gather_rows(ctx, &rows)?;
                let mean = tape.mean_rows(present)?;
                let sum = tape.add_row(f, mean)?;
                tape.layer_norm(sum, gamma, beta)
            }
            Integration::Concat => {
                let (h, w) = cfg.feature_hw();
                let s = cfg.s;
                let mut parts = vec![f];
                for b in 0..blocks {
                    let idx: Vec<usize> = (0..h * w)
                        .map(|i| {
                            let (y, x) = (i / w, i % w);
                            b * per + (y * s / h) * s + (x * s / w)
                        })
                        .collect();
                    parts.push(tape.gather_rows(ctx, &idx)?);
                }
                let cat = tape.concat(&parts, 1)?;
                let (mw, mb) = self.bind(tape, bind, self.ids.mix.expect("mixing weights exist in concat mode"));
                let mixed = tape.linear(cat, mw, mb)?;
                tape.layer_norm(mixed, gamma, beta)
            }
        }
    }

    /// Injected features `[h*w,d]` to per-anchor outputs.
    pub fn decode(&self, tape: &mut Tape<f32>, bind: &mut Binding, f: Var) -> Result<Decoded> {
        let cfg = &self.cfg;
        let (h, w) = cfg.feature_hw();
        let x = tape.reshape(f, vec![1, h, w, cfg.d])?;
        let (cw, cb) = self.bind(tape, bind, self.ids.trunk_conv);
        let c = tape.conv2d(x, cw, cb, 1, 1)?;
        let c = tape.gelu(c)?;
        let c = tape.reshape(c, vec![h * w, cfg.d])?;
        let (tw, tb) = self.bind(tape, bind, self.ids.trunk);
        let t = tape.linear(c, tw, tb)?;
        let t = tape.gelu(t)?;
        let embed = tape.reshape(t, vec![h * w * cfg.anchors, cfg.d])?;
        let (rw, rb) = self.bind(tape, bind, self.ids.reg);
        let raw = tape.linear(embed, rw, rb)?;
        let offsets = tape.scale(raw, cfg.offset_scale as f64)?;
        let logits = self.head_phi(tape, bind, embed)?;
        Ok(Decoded { offsets, logits, embed })
    }

    /// φ: `[n,d] -> [n,C+1]`.
    pub fn head_phi(&self, tape: &mut Tape<f32>, bind: &mut Binding, e: Var) -> Result<Var> {
        if tape.shape(e).last() != Some(&self.cfg.d) {
            return Err(Error::shape("head_phi", format!("embedding {:?}, width {}", tape.shape(e), self.cfg.d)));
        }
        let (w, b) = self.bind(tape, bind, self.ids.cls);
        tape.linear(e, w, b)
    }

    /// Anchor centers in window pixels, cells row-major with x fastest.
    pub fn anchors(&self) -> Vec<(f32, f32)> {
        anchor_points(&self.cfg)
    }

    /// No-grad features of each window, `[h,w,d]` each, one encoder call per window.
    pub fn encode_windows(&self, patches: &[&[u8]]) -> Result<Vec<Tensor<f32>>> {
        patches.iter().map(|p| self.encode_batch(&[p]).map(|mut v| v.remove(0))).collect()
    }

    /// No-grad batched encode; cheaper but not bit-comparable to per-window calls.
    pub fn encode_batch(&self, patches: &[&[u8]]) -> Result<Vec<Tensor<f32>>> {
        let (h, w) = self.cfg.feature_hw();
        let mut tape = Tape::no_grad();
        let mut bind = Binding::new(&self.params);
        let x = tape.constant(pixels_to_tensor(patches, self.cfg.patch_h, self.cfg.patch_w)?);
        let f = self.encode(&mut tape, &mut bind, x)?;
        let per = h * w * self.cfg.d;
        tape.value(f)
            .data()
            .chunks(per)
            .map(|c| Tensor::new(vec![h, w, self.cfg.d], c.to_vec()))
            .collect()
    }

    /// Pooled context of one feature map `[h,w,d] -> [s,s,d]`.
    pub fn pool_features(&self, f: &Tensor<f32>) -> Tensor<f32> {
        let (h, w) = self.cfg.feature_hw();
        let s = self.cfg.s;
        Tensor::new(vec![s, s, self.cfg.d], kernels::grid_pool(f.data(), 1, h, w, self.cfg.d, s)).expect("pool shape")
    }

    /// Full no-grad window forward from cached features and context.
    pub fn detect_window(&self, features: &Tensor<f32>, ctx: &ContextBlock) -> Result<Vec<Proposal>> {
        let cfg = &self.cfg;
        let (h, w) = cfg.feature_hw();
        if features.shape() != [h, w, cfg.d] {
            return Err(Error::shape("detect_window", format!("features {:?}", features.shape())));
        }
        let mut tape = Tape::no_grad();
        let mut bind = Binding::new(&self.params);
        let f = tape.constant(features.clone().reshape(vec![h * w, cfg.d])?);
        let tokens = ctx.tokens.numel() / cfg.d;
        let c = tape.constant(ctx.tokens.clone().reshape(vec![tokens, cfg.d])?);
        let injected = self.inject(&mut tape, &mut bind, f, c, &ctx.presence)?;
        let out = self.decode(&mut tape, &mut bind, injected)?;
        Ok(proposals_from(&tape, out, &self.anchors(), cfg.categories + 1, cfg.d))
    }
}

/// Reads decoder outputs off a tape.
pub fn proposals_from(tape: &Tape<f32>, out: Decoded, anchors: &[(f32, f32)], classes: usize, d: usize) -> Vec<Proposal> {
    let off = tape.value(out.offsets).data();
    let logits = tape.value(out.logits).data();
    let embed = tape.value(out.embed).data();
    anchors
        .iter()
        .enumerate()
        .map(|(i, &anchor)| Proposal {
            index: i,
            anchor,
            offset: (off[2 * i], off[2 * i + 1]),
            logits: logits[i * classes..(i + 1) * classes].to_vec(),
            embedding: embed[i * d..(i + 1) * d].to_vec(),
        })
        .collect()
}

pub fn anchor_points(cfg: &ModelConfig) -> Vec<(f32, f32)> {
    let (h, w) = cfg.feature_hw();
    let a = cfg.anchor_side();
    let stride = cfg.stride() as f32;
    let mut out = Vec::with_capacity(h * w * cfg.anchors);
    for cy in 0..h {
        for cx in 0..w {
            for i in 0..a {
                for j in 0..a {
                    let x = (cx as f32 + (j as f32 + 0.5) / a as f32) * stride;
                    let y = (cy as f32 + (i as f32 + 0.5) / a as f32) * stride;
                    out.push((x, y));
                }
            }
        }
    }
    out
}

/// Stacks HWC u8 windows into `[n,H,W,3]`, centered and scaled to `[-2,2]`.
pub fn pixels_to_tensor(patches: &[&[u8]], h: usize, w: usize) -> Result<Tensor<f32>> {
    let len = h * w * 3;
    let mut data = Vec::with_capacity(patches.len() * len);
    for p in patches {
        if p.len() != len {
            return Err(Error::shape("encode", format!("window of {} bytes, expected {h}x{w}x3", p.len())));
        }
        data.extend(p.iter().map(|&v| (v as f32 / 255.0 - 0.5) * 4.0));
    }
    Tensor::new(vec![patches.len(), h, w, 3], data)
}
