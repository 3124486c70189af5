use rand::Rng;
use rayon::prelude::*;

use crate::data::NeighborhoodSample;
use crate::error::{Error, Result};
use crate::model::detector::{pixels_to_tensor, proposals_from};
use crate::model::Detector;
use crate::numerics::{Binding, ParamId, Tape, Tensor, Var};

use super::loss::{detection_loss, match_proposals, LossWeights, Target};
use super::selective::sample_context_gradients;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub cls: f64,
    pub loc: f64,
    pub total: f64,
    /// Context entries encoded on the gradient tape, summed over the batch.
    pub context_encodes: usize,
    /// All encoder forwards on the gradient tape, centers included.
    pub tape_encodes: usize,
    pub tape_entries: usize,
    pub tape_values: usize,
}

/// Gradients of the batch-mean loss for every bound detector parameter.
pub struct StepGradients {
    pub grads: Vec<(ParamId, Tensor<f32>)>,
    pub stats: StepStats,
}

/// Which context entries of each sample back-propagate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub tracked: Vec<usize>,
    pub detached: Vec<usize>,
}

pub fn select_batch(batch: &[NeighborhoodSample], k: usize, rng: &mut impl Rng) -> Vec<Selection> {
    batch
        .iter()
        .map(|n| {
            let (tracked, detached) = sample_context_gradients(&n.presence, k, rng);
            Selection { tracked, detached }
        })
        .collect()
}

/// No-grad pooled tokens `[s*s*d]` of windows, one encoder call each.
fn detached_tokens(det: &Detector, windows: &[&[u8]]) -> Result<Vec<Vec<f32>>> {
    windows
        .par_iter()
        .map(|w| {
            let f = det.encode_windows(&[w])?.remove(0);
            Ok(det.pool_features(&f).into_data())
        })
        .collect()
}

/// Forward and backward for one batch with a fixed context selection.
pub fn step_gradients(det: &Detector, batch: &[NeighborhoodSample], sel: &[Selection], w: &LossWeights) -> Result<StepGradients> {
    let cfg = &det.cfg;
    if batch.is_empty() || batch.len() != sel.len() {
        return Err(Error::shape("train_step", format!("{} samples, {} selections", batch.len(), sel.len())));
    }
    let blocks = cfg.blocks();
    let (h, w_) = cfg.feature_hw();
    let d = cfg.d;
    let per = cfg.s * cfg.s;
    for n in batch {
        if n.delta != cfg.delta || n.patches.len() != blocks {
            return Err(Error::shape("train_step", format!("neighborhood delta {} for a delta {} model", n.delta, cfg.delta)));
        }
    }

    // Encoder inputs on the tape: every center, then every tracked entry.
    let mut windows: Vec<&[u8]> = batch.iter().map(|n| n.patches[n.center_index()].as_slice()).collect();
    let mut tracked_row = vec![vec![usize::MAX; blocks]; batch.len()];
    for (b, (n, s)) in batch.iter().zip(sel).enumerate() {
        for &i in &s.tracked {
            tracked_row[b][i] = windows.len();
            windows.push(&n.patches[i]);
        }
    }
    let mut detached_windows: Vec<&[u8]> = Vec::new();
    for (n, s) in batch.iter().zip(sel) {
        detached_windows.extend(s.detached.iter().map(|&i| n.patches[i].as_slice()));
    }
    let detached = detached_tokens(det, &detached_windows)?;

    let mut tape = Tape::new();
    let mut bind = Binding::new(&det.params);
    let x = tape.constant(pixels_to_tensor(&windows, cfg.patch_h, cfg.patch_w)?);
    let encoded = det.encode(&mut tape, &mut bind, x)?;
    let n_enc = windows.len();
    let context_encodes = n_enc - batch.len();
    for _ in 0..context_encodes {
        tape.count("context_encode");
    }
    let flat = tape.reshape(encoded, vec![n_enc, h * w_ * d])?;
    let pooled_rows: Option<Var> = if context_encodes > 0 {
        let rows: Vec<usize> = (batch.len()..n_enc).collect();
        let t = tape.gather_rows(flat, &rows)?;
        let t = tape.reshape(t, vec![context_encodes, h, w_, d])?;
        let p = det.pool(&mut tape, t)?;
        Some(tape.reshape(p, vec![context_encodes * per, d])?)
    } else {
        None
    };

    let anchors = det.anchors();
    let mut detached_iter = detached.into_iter();
    let mut totals = Vec::with_capacity(batch.len());
    let (mut cls_sum, mut loc_sum) = (0.0, 0.0);
    for (b, (n, s)) in batch.iter().zip(sel).enumerate() {
        let mut parts = Vec::with_capacity(blocks);
        for i in 0..blocks {
            let part = if tracked_row[b][i] != usize::MAX {
                let t = tracked_row[b][i] - batch.len();
                let rows: Vec<usize> = (t * per..(t + 1) * per).collect();
                tape.gather_rows(pooled_rows.expect("tracked rows exist"), &rows)?
            } else if s.detached.contains(&i) {
                let v = detached_iter.next().expect("one detached encoding per entry");
                tape.constant(Tensor::new(vec![per, d], v)?)
            } else {
                tape.constant(Tensor::zeros(vec![per, d]))
            };
            parts.push(part);
        }
        let ctx = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? };
        let center = tape.gather_rows(flat, &[b])?;
        let f = tape.reshape(center, vec![h * w_, d])?;
        let injected = det.inject(&mut tape, &mut bind, f, ctx, &n.presence)?;
        let out = det.decode(&mut tape, &mut bind, injected)?;
        let props = proposals_from(&tape, out, &anchors, cfg.categories + 1, d);
        let gts: Vec<Target> = n.annotations.iter().map(Target::from).collect();
        let assignment = match_proposals(&props, &gts, w)?;
        let loss = detection_loss(&mut tape, &out, &anchors, &assignment, &gts, w)?;
        cls_sum += tape.value(loss.cls).data()[0] as f64;
        loc_sum += tape.value(loss.loc).data()[0] as f64;
        totals.push(loss.total);
    }
    let sum = if totals.len() == 1 { totals[0] } else { tape.concat(&totals, 0)? };
    let sum = tape.sum(sum)?;
    let loss = tape.scale(sum, 1.0 / batch.len() as f64)?;
    let total = tape.value(loss).data()[0] as f64;
    let stats = StepStats {
        cls: cls_sum / batch.len() as f64,
        loc: loc_sum / batch.len() as f64,
        total,
        context_encodes: tape.counter("context_encode"),
        tape_encodes: tape.counter("encode"),
        tape_entries: tape.entries(),
        tape_values: tape.recorded_values(),
    };
    if !total.is_finite() {
        return Err(Error::Runtime(format!("non-finite loss (cls {}, loc {})", stats.cls, stats.loc)));
    }
    let bound: Vec<_> = bind.bound().collect();
    let mut g = tape.backward(loss)?;
    let grads = bound
        .into_iter()
        .map(|(id, v)| g.take(v).map(|t| (id, t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(StepGradients { grads, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{neighborhood, PointAnnotation, SlideGrid};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            patch_h: 16,
            patch_w: 16,
            stages: 3,
            s: 2,
            ..Default::default()
        }
    }

    fn slide() -> (SlideGrid, Vec<PointAnnotation>) {
        let patches = (0..9).map(|i| (0..16 * 16 * 3).map(|j| ((i * 31 + j * 7) % 251) as u8).collect()).collect();
        let ann = vec![PointAnnotation {
            r: 1,
            c: 1,
            x: 5.0,
            y: 9.0,
            category: 1,
        }];
        (SlideGrid::new("s", 3, 3, 16, 16, patches).unwrap(), ann)
    }

    #[test]
    fn tape_encodes_follow_k() {
        let det = Detector::new(tiny(), 1).unwrap();
        let (g, a) = slide();
        let n = neighborhood(&g, &a, 1, 1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut entries = Vec::new();
        for k in [0, 3, 9] {
            let sel = select_batch(std::slice::from_ref(&n), k, &mut rng);
            let out = step_gradients(&det, std::slice::from_ref(&n), &sel, &LossWeights::default()).unwrap();
            assert_eq!(out.stats.context_encodes, k);
            assert_eq!(out.stats.tape_encodes, k + 1);
            assert!(out.stats.total.is_finite());
            entries.push(out.stats.tape_values);
        }
        // Recorded values grow with k.
        assert!(entries[0] < entries[1] && entries[1] < entries[2]);
    }

    #[test]
    fn corner_window_uses_present_entries_only() {
        let det = Detector::new(tiny(), 1).unwrap();
        let (g, a) = slide();
        let n = neighborhood(&g, &a, 0, 0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sel = select_batch(std::slice::from_ref(&n), 9, &mut rng);
        assert_eq!(sel[0].tracked.len(), 4);
        let out = step_gradients(&det, &[n], &sel, &LossWeights::default()).unwrap();
        assert_eq!(out.stats.context_encodes, 4);
    }
}
