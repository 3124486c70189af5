use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::detector::{argmax, pixels_to_tensor};
use crate::numerics::{AdamW, AdamWConfig, Binding, Tape, Tensor};

use super::labels::PseudoMask;
use super::net::AuxSeg;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuxTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Pseudo-mask disk radius in pixels.
    pub rho: f64,
    /// Weight pixels by inverse class frequency within each batch.
    pub balanced: bool,
}

impl Default for AuxTrainConfig {
    fn default() -> Self {
        AuxTrainConfig {
            epochs: 20,
            batch: 4,
            lr: 5e-3,
            seed: 0,
            rho: 5.0,
            balanced: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AuxSample {
    pub pixels: Vec<u8>,
    pub mask: PseudoMask,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuxReport {
    /// Mean per-pixel cross-entropy of each epoch.
    pub epoch_loss: Vec<f64>,
    pub val_pixel_accuracy: Option<f64>,
}

/// Per-pixel weights giving every class present in `targets` the same total
/// mass, normalized to sum to 1.
pub fn balanced_weights(targets: &[usize], k: usize) -> Vec<f32> {
    let mut count = vec![0usize; k];
    for &t in targets {
        count[t] += 1;
    }
    let present = count.iter().filter(|&&c| c > 0).count().max(1);
    targets.iter().map(|&t| (1.0 / (present * count[t]) as f64) as f32).collect()
}

/// One optimizer step on a batch; returns the (weighted) pixel cross-entropy.
pub fn aux_step(model: &mut AuxSeg, opt: &mut AdamW, batch: &[&AuxSample], balanced: bool) -> Result<f64> {
    let (h, w) = (model.cfg.patch_h, model.cfg.patch_w);
    let k = model.cfg.categories + 1;
    let mut tape = Tape::new();
    let mut bind = Binding::new(&model.params);
    let px: Vec<&[u8]> = batch.iter().map(|s| s.pixels.as_slice()).collect();
    let x = tape.constant(pixels_to_tensor(&px, h, w)?);
    let out = model.forward(&mut tape, &mut bind, x)?;
    let n = batch.len() * h * w;
    let flat = tape.reshape(out.logits, vec![n, k])?;
    let logp = tape.log_softmax(flat)?;
    let targets: Vec<usize> = batch.iter().flat_map(|s| s.mask.labels.iter().copied()).collect();
    let picked = tape.pick(logp, &targets)?;
    let weights = if balanced {
        balanced_weights(&targets, k)
    } else {
        vec![1.0 / n as f32; n]
    };
    let weights = tape.constant(Tensor::new(vec![n], weights)?);
    let weighted = tape.mul(picked, weights)?;
    let total = tape.sum(weighted)?;
    let loss = tape.scale(total, -1.0)?;
    let value = tape.value(loss).data()[0] as f64;
    let bound: Vec<_> = bind.bound().collect();
    let mut grads = tape.backward(loss)?;
    let pairs = bound
        .into_iter()
        .map(|(id, v)| grads.take(v).map(|g| (id, g)))
        .collect::<Result<Vec<_>>>()?;
    opt.step(&mut model.params, &pairs)?;
    Ok(value)
}

pub fn pixel_accuracy(model: &AuxSeg, samples: &[AuxSample]) -> Result<f64> {
    let k = model.cfg.categories + 1;
    let (mut hit, mut total) = (0usize, 0usize);
    for s in samples {
        let (logits, _) = model.predict(&s.pixels)?;
        for (px, &t) in logits.data().chunks(k).zip(&s.mask.labels) {
            hit += (argmax(px) == t) as usize;
            total += 1;
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}

/// Minimizes per-pixel cross-entropy against the pseudo masks.
pub fn train_aux(model: &mut AuxSeg, train: &[AuxSample], val: &[AuxSample], cfg: &AuxTrainConfig) -> Result<AuxReport> {
    if train.is_empty() {
        return Err(Error::Config("auxiliary training set is empty".into()));
    }
    if cfg.epochs == 0 || cfg.batch == 0 {
        return Err(Error::Config("auxiliary epochs and batch must be positive".into()));
    }
    let mut opt = AdamW::new(
        &model.params,
        AdamWConfig {
            lr: cfg.lr,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = AuxReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<&AuxSample> = chunk.iter().map(|&i| &train[i]).collect();
            let l = aux_step(model, &mut opt, &batch, cfg.balanced)?;
            if !l.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: steps,
                    detail: "auxiliary loss is not finite".into(),
                });
            }
            sum += l;
            steps += 1;
        }
        let mean = sum / steps as f64;
        log::info!("aux epoch {epoch}: loss {mean:.4}");
        report.epoch_loss.push(mean);
    }
    if !val.is_empty() {
        report.val_pixel_accuracy = Some(pixel_accuracy(model, val)?);
    }
    Ok(report)
}
