use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{neighborhood, Dihedral, NeighborhoodSample, PointAnnotation, SlideGrid};
use crate::error::{Error, Result};
use crate::inference::{run, Detection, InferenceConfig, MemorySource, Mode, Models};
use crate::metrics::{f1_from_counts, match_detections, match_points, merge_counts, CategoryCounts, ClassScores, EvalConfig, Point};
use crate::model::Detector;
use crate::numerics::{AdamW, AdamWConfig};

use super::loss::LossWeights;
use super::step::{select_batch, step_gradients};

#[derive(Clone, Debug)]
pub struct SlideData {
    pub slide: SlideGrid,
    pub annotations: Vec<PointAnnotation>,
}

/// Which windows of a slide count as annotated for training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Labeling {
    All,
    /// Windows with even `r + c`; the others are unlabeled surroundings.
    Checkerboard,
}

impl Labeling {
    pub fn annotated(&self, r: usize, c: usize) -> bool {
        match self {
            Labeling::All => true,
            Labeling::Checkerboard => (r + c) % 2 == 0,
        }
    }

    pub fn windows(&self, slide: &SlideGrid, annotated: bool) -> Vec<(usize, usize)> {
        (0..slide.rows)
            .flat_map(|r| (0..slide.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| self.annotated(r, c) == annotated)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Random flips and quarter turns of whole neighborhoods.
    pub augment: bool,
    pub labeling: Labeling,
    pub weights: LossWeights,
    /// Validate every this many epochs (and after the last one).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch: 2,
            lr: 3e-4,
            weight_decay: 1e-4,
            seed: 0,
            augment: true,
            labeling: Labeling::Checkerboard,
            weights: LossWeights::default(),
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || self.val_every == 0 {
            return Err(Error::Config("epochs, batch and val_every must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub cls_loss: f64,
    pub loc_loss: f64,
    pub total_loss: f64,
    pub val: Option<ClassScores>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub steps: usize,
    pub best_epoch: Option<usize>,
    pub best_val_f1: Option<f64>,
    /// Context encodes recorded on the gradient tape over the whole run.
    pub context_encodes: usize,
}

impl TrainReport {
    /// `epoch,cls_loss,loc_loss,total_loss,val_f1,val_f1_c0,...`
    pub fn metrics_csv(&self, categories: usize) -> String {
        let mut s = String::from("epoch,cls_loss,loc_loss,total_loss,val_f1");
        for c in 0..categories {
            let _ = write!(s, ",val_f1_c{c}");
        }
        s.push('\n');
        for e in &self.epochs {
            let _ = write!(s, "{},{},{},{}", e.epoch, e.cls_loss, e.loc_loss, e.total_loss);
            match &e.val {
                Some(v) => {
                    let _ = write!(s, ",{}", v.average_f1);
                    for c in 0..categories {
                        match v.per_category.get(c).and_then(|x| x.f1) {
                            Some(f) => {
                                let _ = write!(s, ",{f}");
                            }
                            None => s.push(','),
                        }
                    }
                }
                None => s.push_str(&",".repeat(categories + 1)),
            }
            s.push('\n');
        }
        s
    }
}

/// Training neighborhood of an annotated window, optionally transformed.
pub fn training_sample(data: &SlideData, r: usize, c: usize, delta: usize, aug: Dihedral) -> Result<NeighborhoodSample> {
    let n = neighborhood(&data.slide, &data.annotations, r, c, delta)?;
    if aug == Dihedral::IDENTITY {
        return Ok(n);
    }
    if data.slide.patch_h != data.slide.patch_w {
        return Err(Error::Config("augmentation needs square windows".into()));
    }
    Ok(aug.apply_neighborhood(&n, data.slide.patch_w))
}

/// Trains the detector in place and restores the weights of the best
/// validation epoch (the last epoch when there is no validation set).
pub fn train_main(
    det: &mut Detector,
    train: &[SlideData],
    val: &[SlideData],
    cfg: &TrainConfig,
    eval: &EvalConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    eval.validate()?;
    let mut order: Vec<(usize, usize, usize)> = Vec::new();
    for (i, s) in train.iter().enumerate() {
        order.extend(cfg.labeling.windows(&s.slide, true).into_iter().map(|(r, c)| (i, r, c)));
    }
    if order.is_empty() {
        return Err(Error::Config("no annotated training windows".into()));
    }
    let mut opt = AdamW::new(
        &det.params,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, crate::numerics::ParamStore)> = None;
    let delta = det.cfg.delta;
    let k = det.cfg.k;
    let transforms: Vec<Dihedral> = Dihedral::all().collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut cls, mut loc, mut total, mut n) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let batch = chunk
                .iter()
                .map(|&(i, r, c)| {
                    let aug = if cfg.augment {
                        transforms[rng.random_range(0..transforms.len())]
                    } else {
                        Dihedral::IDENTITY
                    };
                    training_sample(&train[i], r, c, delta, aug)
                })
                .collect::<Result<Vec<_>>>()?;
            let sel = select_batch(&batch, k, &mut rng);
            let out = step_gradients(det, &batch, &sel, &cfg.weights).map_err(|e| match e {
                Error::Runtime(detail) => Error::Diverged {
                    epoch,
                    step: report.steps,
                    detail,
                },
                other => other,
            })?;
            opt.step(&mut det.params, &out.grads)?;
            if det.params.ids().any(|id| !det.params.get(id).is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step: report.steps,
                    detail: "non-finite parameters after the update".into(),
                });
            }
            cls += out.stats.cls;
            loc += out.stats.loc;
            total += out.stats.total;
            n += 1;
            report.steps += 1;
            report.context_encodes += out.stats.context_encodes;
        }
        let n = n as f64;
        let last = epoch + 1 == cfg.epochs;
        let val_scores = if !val.is_empty() && ((epoch + 1) % cfg.val_every == 0 || last) {
            Some(evaluate(Models::detector_only(det), val, cfg.labeling, eval, &InferenceConfig::default())?.scores)
        } else {
            None
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (cls {:.4}, loc {:.4}){}",
            total / n,
            cls / n,
            loc / n,
            val_scores.as_ref().map(|v| format!(", val F1 {:.4}", v.average_f1)).unwrap_or_default()
        );
        if let Some(v) = &val_scores {
            if best.as_ref().is_none_or(|(b, _)| v.average_f1 > *b) {
                best = Some((v.average_f1, det.params.clone()));
                report.best_epoch = Some(epoch);
                report.best_val_f1 = Some(v.average_f1);
                if let Some(path) = checkpoint {
                    det.save(path)?;
                }
            }
        }
        report.epochs.push(EpochLog {
            epoch,
            cls_loss: cls / n,
            loc_loss: loc / n,
            total_loss: total / n,
            val: val_scores,
        });
    }
    match best {
        Some((_, params)) => det.params = params,
        None => {
            if let Some(path) = checkpoint {
                det.save(path)?;
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub scores: ClassScores,
    pub counts: Vec<CategoryCounts>,
    /// `confusion[gt][pred]` over class-agnostic σ-matches.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalOutcome {
    /// Fraction of class-agnostic matches on ground truth in `cats` whose
    /// predicted category is correct.
    pub fn accuracy_on(&self, cats: &[usize]) -> f64 {
        let (mut hit, mut all) = (0, 0);
        for &g in cats {
            hit += self.confusion[g][g];
            all += self.confusion[g].iter().sum::<usize>();
        }
        if all == 0 {
            0.0
        } else {
            hit as f64 / all as f64
        }
    }
}

pub fn to_point(d: &Detection) -> Point {
    Point::new(d.global_x, d.global_y, d.category)
}

pub fn gt_point(a: &PointAnnotation, slide: &SlideGrid) -> Point {
    Point::new((a.c * slide.patch_w) as f64 + a.x, (a.r * slide.patch_h) as f64 + a.y, a.category)
}

/// Scores the detections of one slide against the annotations of the
/// windows selected by `keep`, in slide coordinates.
pub fn score_slide(
    data: &SlideData,
    detections: &[Detection],
    keep: impl Fn(usize, usize) -> bool,
    eval: &EvalConfig,
    counts: &mut Vec<CategoryCounts>,
    confusion: &mut [Vec<usize>],
) -> Result<()> {
    let preds: Vec<Point> = detections.iter().filter(|d| keep(d.r, d.c)).map(to_point).collect();
    let gts: Vec<Point> = data
        .annotations
        .iter()
        .filter(|a| keep(a.r, a.c))
        .map(|a| gt_point(a, &data.slide))
        .collect();
    let a = match_detections(&preds, &gts, eval)?;
    merge_counts(counts, &a.per_category);
    for (i, j) in match_points(&preds, &gts, eval.sigma, eval.rule)? {
        confusion[gts[j].category][preds[i].category] += 1;
    }
    Ok(())
}

/// Detects every slide (full-context streaming) and scores annotated windows.
pub fn evaluate(models: Models, slides: &[SlideData], labeling: Labeling, eval: &EvalConfig, inf: &InferenceConfig) -> Result<EvalOutcome> {
    let mut counts = vec![CategoryCounts::default(); eval.categories];
    let mut confusion = vec![vec![0; eval.categories]; eval.categories];
    let inf = InferenceConfig {
        mode: if inf.mode == Mode::TwoPass { Mode::TwoPass } else { inf.mode },
        ..inf.clone()
    };
    for s in slides {
        let (dets, _) = run(&mut MemorySource::new(&s.slide), models, &inf)?;
        score_slide(s, &dets, |r, c| labeling.annotated(r, c), eval, &mut counts, &mut confusion)?;
    }
    Ok(EvalOutcome {
        scores: f1_from_counts(&counts, eval.empty),
        counts,
        confusion,
    })
}
