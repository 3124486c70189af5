//! Small multi-class segmenter: a 4x4 patchify stem, three levels of four
//! depthwise-separable residual blocks, a top-down FPN and two pixel-shuffle
//! stages back to full resolution.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::detector::pixels_to_tensor;
use crate::numerics::{Binding, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuxConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    pub width: usize,
    pub blocks_per_level: usize,
    pub d_m: usize,
    pub categories: usize,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig {
            patch_h: 64,
            patch_w: 64,
            width: 8,
            blocks_per_level: 4,
            d_m: 16,
            categories: 3,
        }
    }
}

pub const LEVELS: usize = 3;

impl AuxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_h % 16 != 0 || self.patch_w % 16 != 0 || self.patch_h == 0 || self.patch_w == 0 {
            return Err(Error::Config(format!(
                "auxiliary model needs windows divisible by 16, got {}x{}",
                self.patch_h, self.patch_w
            )));
        }
        if self.width == 0 || self.d_m == 0 || self.categories == 0 {
            return Err(Error::Config("auxiliary widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Pair {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Ids {
    stem: Pair,
    /// Per level: (depthwise, pointwise) per block.
    blocks: Vec<Vec<(Pair, Pair)>>,
    down: Vec<Pair>,
    lateral: Vec<Pair>,
    shuffle1: Pair,
    shuffle2: Pair,
    classifier: Pair,
}

#[derive(Clone, Debug)]
pub struct AuxSeg {
    pub cfg: AuxConfig,
    pub params: ParamStore,
    ids: Ids,
}

/// Full-resolution outputs for a batch: logits `[n,H,W,C+1]` and the
/// morphology features `[n,H,W,d_m]` that feed the classifier.
#[derive(Clone, Copy, Debug)]
pub struct AuxOut {
    pub logits: Var,
    pub morph: Var,
}

impl AuxSeg {
    pub fn new(cfg: AuxConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let c = cfg.width;
        let mut conv = |p: &mut ParamStore, name: &str, k: usize, cin: usize, cout: usize| -> Result<Pair> {
            Ok(Pair {
                w: p.insert(format!("{name}.w"), ParamStore::conv_normal(&mut rng, [k, k, cin, cout]))?,
                b: p.insert(format!("{name}.b"), Tensor::zeros(vec![cout]))?,
            })
        };
        let stem = conv(&mut p, "aux.stem", 4, 3, c)?;
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut blocks = Vec::new();
        let mut down = Vec::new();
        let mut lateral = Vec::new();
        for level in 0..LEVELS {
            let mut lv = Vec::new();
            for b in 0..cfg.blocks_per_level {
                let name = format!("aux.l{level}.b{b}");
                let dw = Pair {
                    w: p.insert(format!("{name}.dw.w"), ParamStore::depthwise_normal(&mut rng2, [3, 3, c]))?,
                    b: p.insert(format!("{name}.dw.b"), Tensor::zeros(vec![c]))?,
                };
                let pw = Pair {
                    w: p.insert(format!("{name}.pw.w"), ParamStore::xavier(&mut rng2, c, c))?,
                    b: p.insert(format!("{name}.pw.b"), Tensor::zeros(vec![c]))?,
                };
                lv.push((dw, pw));
            }
            blocks.push(lv);
            if level + 1 < LEVELS {
                down.push(conv(&mut p, &format!("aux.down{level}"), 2, c, c)?);
            }
            lateral.push(Pair {
                w: p.insert(format!("aux.lat{level}.w"), ParamStore::xavier(&mut rng2, c, c))?,
                b: p.insert(format!("aux.lat{level}.b"), Tensor::zeros(vec![c]))?,
            });
        }
        let mut dense = |p: &mut ParamStore, name: &str, din: usize, dout: usize| -> Result<Pair> {
            Ok(Pair {
                w: p.insert(format!("{name}.w"), ParamStore::xavier(&mut rng2, din, dout))?,
                b: p.insert(format!("{name}.b"), Tensor::zeros(vec![dout]))?,
            })
        };
        let shuffle1 = dense(&mut p, "aux.ps1", c, 4 * c)?;
        let shuffle2 = dense(&mut p, "aux.ps2", c, 4 * cfg.d_m)?;
        let classifier = dense(&mut p, "aux.cls", cfg.d_m, cfg.categories + 1)?;
        Ok(AuxSeg {
            cfg,
            params: p,
            ids: Ids {
                stem,
                blocks,
                down,
                lateral,
                shuffle1,
                shuffle2,
                classifier,
            },
        })
    }

    fn pair(&self, tape: &mut Tape<f32>, bind: &mut Binding, p: Pair) -> (Var, Var) {
        (bind.var(tape, &self.params, p.w), bind.var(tape, &self.params, p.b))
    }

    pub fn forward(&self, tape: &mut Tape<f32>, bind: &mut Binding, x: Var) -> Result<AuxOut> {
        let (w, b) = self.pair(tape, bind, self.ids.stem);
        let mut h = tape.conv2d(x, w, b, 4, 0)?;
        let mut levels = Vec::with_capacity(LEVELS);
        for level in 0..LEVELS {
            for &(dw, pw) in &self.ids.blocks[level] {
                let (dww, dwb) = self.pair(tape, bind, dw);
                let y = tape.depthwise_conv2d(h, dww, dwb, 1)?;
                let (pww, pwb) = self.pair(tape, bind, pw);
                let y = tape.linear(y, pww, pwb)?;
                let y = tape.gelu(y)?;
                h = tape.add(h, y)?;
            }
            levels.push(h);
            if level + 1 < LEVELS {
                let (w, b) = self.pair(tape, bind, self.ids.down[level]);
                h = tape.conv2d(h, w, b, 2, 0)?;
            }
        }
        let mut top: Option<Var> = None;
        for level in (0..LEVELS).rev() {
            let (w, b) = self.pair(tape, bind, self.ids.lateral[level]);
            let lat = tape.linear(levels[level], w, b)?;
            top = Some(match top {
                None => lat,
                Some(t) => {
                    let up = tape.upsample_nearest(t, 2)?;
                    tape.add(lat, up)?
                }
            });
        }
        let p = top.expect("at least one level");
        let (w, b) = self.pair(tape, bind, self.ids.shuffle1);
        let y = tape.linear(p, w, b)?;
        let y = tape.depth_to_space(y, 2)?;
        let y = tape.gelu(y)?;
        let (w, b) = self.pair(tape, bind, self.ids.shuffle2);
        let y = tape.linear(y, w, b)?;
        let y = tape.depth_to_space(y, 2)?;
        let morph = tape.gelu(y)?;
        let (w, b) = self.pair(tape, bind, self.ids.classifier);
        let logits = tape.linear(morph, w, b)?;
        Ok(AuxOut { logits, morph })
    }

    /// No-grad `(logits [H,W,C+1], morph [H,W,d_m])` for one window.
    pub fn predict(&self, patch: &[u8]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut tape = Tape::no_grad();
        tape.count("aux_forward");
        let mut bind = Binding::new(&self.params);
        let x = tape.constant(pixels_to_tensor(&[patch], self.cfg.patch_h, self.cfg.patch_w)?);
        let out = self.forward(&mut tape, &mut bind, x)?;
        let (h, w) = (self.cfg.patch_h, self.cfg.patch_w);
        let logits = tape.value(out.logits).clone().reshape(vec![h, w, self.cfg.categories + 1])?;
        let morph = tape.value(out.morph).clone().reshape(vec![h, w, self.cfg.d_m])?;
        Ok((logits, morph))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)?;
        let side = path.with_extension("json");
        std::fs::write(&side, serde_json::to_vec_pretty(&self.cfg)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = path.with_extension("json");
        let bytes = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let cfg: AuxConfig = serde_json::from_slice(&bytes)?;
        let mut model = AuxSeg::new(cfg, 0)?;
        let stored = ParamStore::load(path)?;
        if stored.len() != model.params.len() {
            return Err(Error::Format {
                what: "checkpoint",
                detail: format!("{} tensors, auxiliary model expects {}", stored.len(), model.params.len()),
            });
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            match stored.id(&name) {
                Some(j) if stored.get(j).shape() == model.params.get(id).shape() => {
                    *model.params.get_mut(id) = stored.get(j).clone();
                }
                _ => {
                    return Err(Error::Format {
                        what: "checkpoint",
                        detail: format!("auxiliary parameter {name} missing or misshapen"),
                    })
                }
            }
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Detector, ModelConfig};

    #[test]
    fn full_resolution_outputs() {
        let m = AuxSeg::new(AuxConfig::default(), 1).unwrap();
        let px = vec![77u8; 64 * 64 * 3];
        let (logits, morph) = m.predict(&px).unwrap();
        assert_eq!(logits.shape(), [64, 64, 4]);
        assert_eq!(morph.shape(), [64, 64, 16]);
        let (again, _) = m.predict(&px).unwrap();
        assert_eq!(logits, again);
    }

    #[test]
    fn twelve_blocks_and_small_footprint() {
        let m = AuxSeg::new(AuxConfig::default(), 1).unwrap();
        let blocks = m.params.ids().filter(|&id| m.params.name(id).ends_with(".dw.w")).count();
        assert_eq!(blocks, 12);
        let det = Detector::new(ModelConfig::default(), 1).unwrap();
        let ratio = m.params.numel() as f64 / det.params.numel() as f64;
        assert!(ratio <= 0.15, "aux/detector parameter ratio {ratio}");
    }

    #[test]
    fn shares_no_parameter_names_with_the_detector() {
        let m = AuxSeg::new(AuxConfig::default(), 1).unwrap();
        let det = Detector::new(ModelConfig::default(), 1).unwrap();
        assert!(m.params.ids().all(|id| det.params.id(m.params.name(id)).is_none()));
    }
}
