use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::auxseg::{cross_label, morph_embed, rasterize_pseudo_masks, AuxSample, AuxSeg, VoteMode};
use crate::data::{window_annotations, SlideGrid};
use crate::error::{Error, Result};
use crate::metrics::{match_points, MatchRule, Point};
use crate::model::detector::{assemble_context, PooledContext, Proposal};
use crate::model::{join_features, Detector, PhiPrime};
use crate::numerics::{kernels, AdamW, AdamWConfig, Binding, Tape, Tensor};

use super::loss::{match_proposals, LossWeights, Target};
use super::trainer::{Labeling, SlideData};

/// Where the labels of surrounding-window samples come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoSource {
    /// Auxiliary segmentation maps.
    Cross,
    /// The detector's own φ predictions above a confidence threshold.
    SelfLabel,
}

impl std::str::FromStr for PseudoSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cl" | "cross" => Ok(PseudoSource::Cross),
            "sl" | "self" | "self_label" => Ok(PseudoSource::SelfLabel),
            _ => Err(Error::Config(format!("unknown pseudo-label source {s:?} (cl, sl)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub source: PseudoSource,
    /// Minimum φ confidence for self-labels.
    pub sl_threshold: f64,
    /// Optional minimum aux confidence for cross-labels.
    pub cl_threshold: Option<f64>,
    pub vote: VoteMode,
    /// Feed morphology embeddings; zeros when off.
    pub use_me: bool,
    /// Foreground threshold for pre-detection; `None` uses the detector's.
    pub theta_det: Option<f32>,
    /// Distance for scoring pseudo-labels against hidden ground truth.
    pub sigma: f64,
}

impl Default for PostConfig {
    fn default() -> Self {
        PostConfig {
            epochs: 100,
            batch: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            source: PseudoSource::Cross,
            sl_threshold: 0.9,
            cl_threshold: None,
            vote: VoteMode::Majority3x3,
            use_me: true,
            theta_det: None,
            sigma: 6.0,
        }
    }
}

impl PostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("post-training epochs and batch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.sl_threshold) {
            return Err(Error::Config(format!("sl_threshold {} outside [0,1]", self.sl_threshold)));
        }
        Ok(())
    }
}

/// Every window's proposals under full context, row-major.
pub fn window_proposals(det: &Detector, slide: &SlideGrid) -> Result<Vec<Vec<Proposal>>> {
    let n = slide.rows * slide.cols;
    let features: Vec<Tensor<f32>> = (0..n)
        .into_par_iter()
        .map(|i| Ok(det.encode_batch(&[slide.patch(i / slide.cols, i % slide.cols)])?.remove(0)))
        .collect::<Result<Vec<_>>>()?;
    let tokens: Vec<Tensor<f32>> = features.iter().map(|f| det.pool_features(f)).collect();
    let delta = det.cfg.delta;
    let zero = Tensor::zeros(tokens[0].shape().to_vec());
    (0..n)
        .into_par_iter()
        .map(|i| {
            let (r, c) = (i / slide.cols, i % slide.cols);
            let d = delta as i64;
            let entries: Vec<PooledContext> = slide
                .neighbor_positions(r, c, delta)
                .into_iter()
                .enumerate()
                .map(|(j, p)| {
                    let side = 2 * d + 1;
                    let source = (r as i64 + j as i64 / side - d, c as i64 + j as i64 % side - d);
                    match p {
                        Some((rr, cc)) => PooledContext {
                            tokens: tokens[rr * slide.cols + cc].clone(),
                            source,
                            present: true,
                        },
                        None => PooledContext {
                            tokens: zero.clone(),
                            source,
                            present: false,
                        },
                    }
                })
                .collect();
            det.detect_window(&features[i], &assemble_context(&entries, delta)?)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreDetection {
    pub r: usize,
    pub c: usize,
    pub x: f64,
    pub y: f64,
    pub score: f64,
    /// φ's category and its softmax probability.
    pub category: usize,
    pub confidence: f64,
    pub embedding: Vec<f32>,
}

fn pre_detection(r: usize, c: usize, p: &Proposal) -> PreDetection {
    let (x, y) = p.point();
    let probs = kernels::softmax(&p.logits, p.logits.len());
    let category = p.category();
    PreDetection {
        r,
        c,
        x: x as f64,
        y: y as f64,
        score: p.foreground() as f64,
        category,
        confidence: probs[category] as f64,
        embedding: p.embedding.clone(),
    }
}

/// Context-aware detections on the listed windows with foreground score ≥ θ.
pub fn pre_detect(det: &Detector, slide: &SlideGrid, windows: &[(usize, usize)], theta: f32) -> Result<Vec<PreDetection>> {
    let props = window_proposals(det, slide)?;
    let mut out = Vec::new();
    for &(r, c) in windows {
        let w = props
            .get(r * slide.cols + c)
            .filter(|_| r < slide.rows && c < slide.cols)
            .ok_or_else(|| Error::OutOfRange(format!("window ({r},{c})")))?;
        out.extend(w.iter().filter(|p| p.foreground() >= theta).map(|p| pre_detection(r, c, p)));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelOrigin {
    Gt,
    Cross,
    SelfLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhiSample {
    /// `[e; m]`.
    pub features: Vec<f32>,
    pub label: usize,
    pub origin: LabelOrigin,
}

/// One line of the pseudo-label dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub slide_id: String,
    pub r: usize,
    pub c: usize,
    pub x: f64,
    pub y: f64,
    pub pseudo_category: usize,
    pub detector_score: f64,
    /// Vote share of the aux winner, or φ's confidence for self-labels.
    pub aux_agreement: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoStats {
    pub pre_detections: usize,
    pub kept: usize,
    pub dropped: usize,
    /// Kept pseudo-labels within σ of a hidden ground-truth nucleus.
    pub matched: usize,
    pub correct: usize,
}

impl PseudoStats {
    /// Category agreement with hidden ground truth over matched pseudo-labels.
    pub fn agreement(&self) -> Option<f64> {
        (self.matched > 0).then(|| self.correct as f64 / self.matched as f64)
    }
}

fn morph_at(map: Option<&Tensor<f32>>, d_m: usize, h: usize, w: usize, x: f64, y: f64) -> Result<Vec<f32>> {
    match map {
        Some(mf) => morph_embed(mf, h, w, x.clamp(0.0, w as f64 - 1e-3), y.clamp(0.0, h as f64 - 1e-3)),
        None => Ok(vec![0.0; d_m]),
    }
}

/// Builds the refinement-head training set of one slide.
pub fn phi_samples(
    det: &Detector,
    aux: Option<&AuxSeg>,
    data: &SlideData,
    labeling: Labeling,
    cfg: &PostConfig,
) -> Result<(Vec<PhiSample>, Vec<PseudoLabel>, PseudoStats)> {
    if cfg.source == PseudoSource::Cross && aux.is_none() {
        return Err(Error::Config("cross-labeling needs an auxiliary model".into()));
    }
    let slide = &data.slide;
    let (h, w) = (slide.patch_h, slide.patch_w);
    let d_m = det.cfg.d_m;
    let theta = cfg.theta_det.unwrap_or(det.cfg.theta_det);
    let props = window_proposals(det, slide)?;
    let aux_maps: Vec<Option<(Tensor<f32>, Tensor<f32>)>> = (0..slide.rows * slide.cols)
        .into_par_iter()
        .map(|i| match aux {
            Some(a) if cfg.use_me || cfg.source == PseudoSource::Cross => a.predict(slide.patch(i / slide.cols, i % slide.cols)).map(Some),
            _ => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut samples = Vec::new();
    let mut dump = Vec::new();
    let mut stats = PseudoStats::default();
    let weights = LossWeights::default();
    for r in 0..slide.rows {
        for c in 0..slide.cols {
            let i = r * slide.cols + c;
            let morph_map = if cfg.use_me { aux_maps[i].as_ref().map(|m| &m.1) } else { None };
            if labeling.annotated(r, c) {
                let gts: Vec<Target> = window_annotations(&data.annotations, r, c).iter().map(Target::from).collect();
                let a = match_proposals(&props[i], &gts, &weights)?;
                for (pi, gi) in a.pairs {
                    let p = &props[i][pi];
                    let (x, y) = p.point();
                    let m = morph_at(morph_map, d_m, h, w, x as f64, y as f64)?;
                    samples.push(PhiSample {
                        features: join_features(&p.embedding, &m),
                        label: gts[gi].category,
                        origin: LabelOrigin::Gt,
                    });
                }
                continue;
            }
            let pre: Vec<PreDetection> = props[i].iter().filter(|p| p.foreground() >= theta).map(|p| pre_detection(r, c, p)).collect();
            stats.pre_detections += pre.len();
            let labels: Vec<Option<(usize, f64)>> = match cfg.source {
                PseudoSource::Cross => {
                    let map = &aux_maps[i].as_ref().expect("aux present").0;
                    let coords: Vec<(f64, f64)> = pre
                        .iter()
                        .map(|p| (p.x.clamp(0.0, w as f64 - 1e-3), p.y.clamp(0.0, h as f64 - 1e-3)))
                        .collect();
                    cross_label(map, &coords, cfg.vote)?
                        .into_iter()
                        .map(|l| match l.category {
                            Some(k) if cfg.cl_threshold.is_none_or(|t| l.confidence >= t) => Some((k, l.agreement)),
                            _ => None,
                        })
                        .collect()
                }
                PseudoSource::SelfLabel => pre
                    .iter()
                    .map(|p| (p.confidence >= cfg.sl_threshold).then_some((p.category, p.confidence)))
                    .collect(),
            };
            let mut kept = Vec::new();
            for (p, l) in pre.iter().zip(labels) {
                let Some((k, share)) = l else {
                    stats.dropped += 1;
                    continue;
                };
                let m = morph_at(morph_map, d_m, h, w, p.x, p.y)?;
                samples.push(PhiSample {
                    features: join_features(&p.embedding, &m),
                    label: k,
                    origin: match cfg.source {
                        PseudoSource::Cross => LabelOrigin::Cross,
                        PseudoSource::SelfLabel => LabelOrigin::SelfLabel,
                    },
                });
                dump.push(PseudoLabel {
                    slide_id: slide.slide_id.clone(),
                    r,
                    c,
                    x: p.x,
                    y: p.y,
                    pseudo_category: k,
                    detector_score: p.score,
                    aux_agreement: share,
                });
                kept.push(Point::new(p.x, p.y, k));
            }
            stats.kept += kept.len();
            let hidden: Vec<Point> = window_annotations(&data.annotations, r, c)
                .iter()
                .map(|a| Point::new(a.x, a.y, a.category))
                .collect();
            for (pi, gi) in match_points(&kept, &hidden, cfg.sigma, MatchRule::Greedy)? {
                stats.matched += 1;
                if kept[pi].category == hidden[gi].category {
                    stats.correct += 1;
                }
            }
        }
    }
    Ok((samples, dump, stats))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PostReport {
    pub epoch_loss: Vec<f64>,
    pub gt_samples: usize,
    pub pseudo_samples: usize,
    pub pseudo: PseudoStats,
    /// Set when no pseudo-label survived and the head saw ground truth only.
    pub gt_only_fallback: bool,
}

/// Fits a fresh refinement head on frozen detector (and aux) outputs.
pub fn post_train_phi_prime(
    det: &Detector,
    aux: Option<&AuxSeg>,
    slides: &[SlideData],
    labeling: Labeling,
    cfg: &PostConfig,
) -> Result<(PhiPrime, PostReport, Vec<PseudoLabel>)> {
    cfg.validate()?;
    let mut samples = Vec::new();
    let mut dump = Vec::new();
    let mut report = PostReport::default();
    for s in slides {
        let (smp, d, st) = phi_samples(det, aux, s, labeling, cfg)?;
        samples.extend(smp);
        dump.extend(d);
        report.pseudo.pre_detections += st.pre_detections;
        report.pseudo.kept += st.kept;
        report.pseudo.dropped += st.dropped;
        report.pseudo.matched += st.matched;
        report.pseudo.correct += st.correct;
    }
    report.gt_samples = samples.iter().filter(|s| s.origin == LabelOrigin::Gt).count();
    report.pseudo_samples = samples.len() - report.gt_samples;
    if report.pseudo_samples == 0 {
        log::warn!("empty pseudo-label set; fitting the refinement head on ground truth only");
        report.gt_only_fallback = true;
    }
    if samples.is_empty() {
        return Err(Error::Config("no training samples for the refinement head".into()));
    }
    let c = &det.cfg;
    let mut head = PhiPrime::new(c.d, c.d_m, c.phi_hidden, c.categories, cfg.seed)?;
    report.epoch_loss = fit_phi_prime(&mut head, &samples, cfg)?;
    Ok((head, report, dump))
}

/// Mini-batch cross-entropy training; returns the mean loss of each epoch.
pub fn fit_phi_prime(head: &mut PhiPrime, samples: &[PhiSample], cfg: &PostConfig) -> Result<Vec<f64>> {
    let width = head.input_width();
    if let Some(s) = samples.iter().find(|s| s.features.len() != width || s.label >= head.categories) {
        return Err(Error::shape("fit_phi_prime", format!("sample of width {} label {}", s.features.len(), s.label)));
    }
    let mut opt = AdamW::new(
        &head.params,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0);
        for chunk in order.chunks(cfg.batch) {
            let mut tape = Tape::new();
            let mut bind = Binding::new(&head.params);
            let x: Vec<f32> = chunk.iter().flat_map(|&i| samples[i].features.iter().copied()).collect();
            let x = tape.constant(Tensor::new(vec![chunk.len(), width], x)?);
            let logits = head.forward(&mut tape, &mut bind, x)?;
            let logp = tape.log_softmax(logits)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| samples[i].label).collect();
            let picked = tape.pick(logp, &labels)?;
            let total = tape.sum(picked)?;
            let loss = tape.scale(total, -1.0 / chunk.len() as f64)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: n,
                    detail: "non-finite refinement-head loss".into(),
                });
            }
            let bound: Vec<_> = bind.bound().collect();
            let mut grads = tape.backward(loss)?;
            let g = bound
                .into_iter()
                .map(|(id, v)| grads.take(v).map(|t| (id, t)))
                .collect::<Result<Vec<_>>>()?;
            opt.step(&mut head.params, &g)?;
            sum += value;
            n += 1;
        }
        losses.push(sum / n as f64);
    }
    Ok(losses)
}

pub fn write_pseudo_labels_jsonl(path: &Path, labels: &[PseudoLabel]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for l in labels {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Aux training windows: pseudo masks rasterized from annotated windows.
pub fn aux_samples(slides: &[SlideData], labeling: Labeling, rho: f64, categories: usize) -> Vec<AuxSample> {
    let mut out = Vec::new();
    for s in slides {
        for (r, c) in labeling.windows(&s.slide, true) {
            let pts: Vec<(f64, f64, usize)> = window_annotations(&s.annotations, r, c).iter().map(|a| (a.x, a.y, a.category)).collect();
            out.push(AuxSample {
                pixels: s.slide.patch(r, c).to_vec(),
                mask: rasterize_pseudo_masks(&pts, s.slide.patch_h, s.slide.patch_w, rho, categories),
            });
        }
    }
    out
}
