use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::auxseg::{train_aux, AuxReport, AuxSeg};
use crate::data::{list_archives, load_archive, split_slides, synthetic_benchmark, Split};
use crate::error::{Error, Result};
use crate::inference::Models;
use crate::metrics::{f1_table_csv, run_intervals, CategoryScore, ClassScores, RunIntervals};
use crate::model::{Detector, Integration, PhiPrime};
use crate::training::{aux_samples, evaluate, post_train_phi_prime, train_main, EvalOutcome, PostReport, PseudoLabel, PseudoSource, SlideData, TrainReport};

use super::config::RunConfig;

pub fn load_dataset(root: &Path) -> Result<Vec<SlideData>> {
    let dirs = if root.is_dir() { list_archives(root)? } else { Vec::new() };
    if dirs.is_empty() {
        return Err(Error::Missing {
            what: "slide archives",
            path: root.to_path_buf(),
        });
    }
    dirs.iter()
        .map(|d| load_archive(d).map(|(slide, annotations)| SlideData { slide, annotations }))
        .collect()
}

pub fn generate_dataset(cfg: &RunConfig) -> Result<Vec<SlideData>> {
    Ok(synthetic_benchmark(&cfg.generator, cfg.slides)?
        .into_iter()
        .map(|(slide, annotations)| SlideData { slide, annotations })
        .collect())
}

pub fn split(cfg: &RunConfig, data: Vec<SlideData>) -> Result<Split<SlideData>> {
    split_slides(data, cfg.split, cfg.seed)
}

pub fn check_geometry(cfg: &RunConfig, data: &[SlideData]) -> Result<()> {
    for s in data {
        if (s.slide.patch_h, s.slide.patch_w) != (cfg.model.patch_h, cfg.model.patch_w) {
            return Err(Error::Config(format!(
                "slide {} has {}x{} windows, model expects {}x{}",
                s.slide.slide_id, s.slide.patch_h, s.slide.patch_w, cfg.model.patch_h, cfg.model.patch_w
            )));
        }
        if let Some(a) = s.annotations.iter().find(|a| a.category >= cfg.model.categories) {
            return Err(Error::Config(format!(
                "slide {} has category {} but the model has {}",
                s.slide.slide_id, a.category, cfg.model.categories
            )));
        }
    }
    Ok(())
}

/// Initializes from `train.seed` and trains on the split.
pub fn train_detector(cfg: &RunConfig, data: &Split<SlideData>, checkpoint: Option<&Path>) -> Result<(Detector, TrainReport)> {
    let mut det = Detector::new(cfg.model.clone(), cfg.train.seed)?;
    let report = train_main(&mut det, &data.train, &data.val, &cfg.train, &cfg.eval, checkpoint)?;
    Ok((det, report))
}

pub fn train_aux_model(cfg: &RunConfig, data: &Split<SlideData>) -> Result<(AuxSeg, AuxReport)> {
    let labeling = cfg.train.labeling;
    let train = aux_samples(&data.train, labeling, cfg.aux_train.rho, cfg.aux.categories);
    let val = aux_samples(&data.val, labeling, cfg.aux_train.rho, cfg.aux.categories);
    let mut aux = AuxSeg::new(cfg.aux.clone(), cfg.aux_train.seed)?;
    let report = train_aux(&mut aux, &train, &val, &cfg.aux_train)?;
    Ok((aux, report))
}

pub fn post_train(cfg: &RunConfig, det: &Detector, aux: Option<&AuxSeg>, data: &Split<SlideData>) -> Result<(PhiPrime, PostReport, Vec<PseudoLabel>)> {
    post_train_phi_prime(det, aux, &data.train, cfg.train.labeling, &cfg.post)
}

pub fn evaluate_models(cfg: &RunConfig, models: Models, slides: &[SlideData]) -> Result<EvalOutcome> {
    evaluate(models, slides, cfg.train.labeling, &cfg.eval, &cfg.inference)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Context radius δ.
    Delta,
    /// Pooling grid side.
    S,
    Integration,
    /// Self-labeling versus cross-labeling.
    Source,
    /// Cumulative components: baseline, ca, ca_cl, ca_cl_me.
    Components,
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "delta" => Axis::Delta,
            "s" | "pool" => Axis::S,
            "integration" => Axis::Integration,
            "source" | "sl_cl" => Axis::Source,
            "components" => Axis::Components,
            _ => return Err(Error::Config(format!("unknown ablation axis {s:?} (delta, s, integration, source, components)"))),
        })
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Delta => "delta",
            Axis::S => "s",
            Axis::Integration => "integration",
            Axis::Source => "source",
            Axis::Components => "components",
        })
    }
}

impl Axis {
    pub fn default_values(&self) -> &'static [&'static str] {
        match self {
            Axis::Delta => &["0", "1", "2"],
            Axis::S => &["1", "2", "4"],
            Axis::Integration => &["add", "concat", "cross_attn"],
            Axis::Source => &["sl", "cl"],
            Axis::Components => &["baseline", "ca", "ca_cl", "ca_cl_me"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Component {
    Baseline,
    Ca,
    CaCl,
    CaClMe,
}

/// What one ablation cell needs: detector settings plus an optional head.
#[derive(Clone, Debug)]
struct Variant {
    label: String,
    cfg: RunConfig,
    head: Option<PseudoSource>,
}

fn variants(base: &RunConfig, axis: Axis, values: &[String]) -> Result<Vec<Variant>> {
    let mut out = Vec::new();
    for v in values {
        let mut cfg = base.clone();
        let mut head = None;
        let bad = |e: String| Error::Config(format!("ablation value {v:?} for axis {axis}: {e}"));
        match axis {
            Axis::Delta => {
                cfg.model.delta = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
                cfg.model.k = cfg.model.k.min(cfg.model.blocks());
            }
            Axis::S => cfg.model.s = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            Axis::Integration => cfg.model.integration = v.parse::<Integration>()?,
            Axis::Source => {
                let s: PseudoSource = v.parse()?;
                cfg.post.source = s;
                head = Some(s);
            }
            Axis::Components => {
                let c = match v.as_str() {
                    "baseline" => Component::Baseline,
                    "ca" => Component::Ca,
                    "ca_cl" => Component::CaCl,
                    "ca_cl_me" => Component::CaClMe,
                    _ => return Err(bad("expected baseline, ca, ca_cl or ca_cl_me".into())),
                };
                if c == Component::Baseline {
                    cfg.model.delta = 0;
                    cfg.model.k = cfg.model.k.min(1);
                } else if cfg.model.delta == 0 {
                    return Err(bad("context components need delta >= 1".into()));
                }
                if matches!(c, Component::CaCl | Component::CaClMe) {
                    cfg.post.source = PseudoSource::Cross;
                    cfg.post.use_me = c == Component::CaClMe;
                    head = Some(PseudoSource::Cross);
                }
            }
        }
        cfg.inference.use_me = cfg.post.use_me;
        cfg.validate()?;
        out.push(Variant { label: v.clone(), cfg, head });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: String,
    /// Test scores of each run.
    pub runs: Vec<ClassScores>,
    pub mean: ClassScores,
    pub intervals: Option<RunIntervals>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub axis: Axis,
    pub rows: Vec<AblationRow>,
}

impl Ablation {
    /// One row per value with per-category and average F1 in percent.
    pub fn csv(&self, categories: usize) -> String {
        let rows: Vec<(String, ClassScores)> = self.rows.iter().map(|r| (r.value.clone(), r.mean.clone())).collect();
        f1_table_csv(&rows, categories)
    }
}

/// Category-wise mean of several runs; a category stays scored only when
/// every run scored it.
pub fn mean_scores(runs: &[ClassScores]) -> ClassScores {
    let n = runs.len().max(1) as f64;
    let cats = runs.iter().map(|r| r.per_category.len()).max().unwrap_or(0);
    let per_category = (0..cats)
        .map(|c| {
            let col: Vec<&CategoryScore> = runs.iter().filter_map(|r| r.per_category.get(c)).collect();
            let f1: Option<Vec<f64>> = col.iter().map(|s| s.f1).collect();
            CategoryScore {
                tp: col.iter().map(|s| s.tp).sum(),
                fp: col.iter().map(|s| s.fp).sum(),
                fn_: col.iter().map(|s| s.fn_).sum(),
                precision: col.iter().map(|s| s.precision).sum::<f64>() / n,
                recall: col.iter().map(|s| s.recall).sum::<f64>() / n,
                f1: f1.map(|v| v.iter().sum::<f64>() / n),
            }
        })
        .collect();
    ClassScores {
        per_category,
        average_f1: runs.iter().map(|r| r.average_f1).sum::<f64>() / n,
    }
}

/// Trains and tests every value of one axis `runs` times with seeds
/// `seed, seed+1, ...`. Detectors and aux models are shared between cells
/// whose settings agree.
pub fn ablate(base: &RunConfig, data: &Split<SlideData>, axis: Axis, values: &[String], runs: usize) -> Result<Ablation> {
    if runs == 0 {
        return Err(Error::Config("ablation needs at least one run".into()));
    }
    if values.is_empty() {
        return Err(Error::Config("ablation needs at least one value".into()));
    }
    let vars = variants(base, axis, values)?;
    let mut scores: Vec<Vec<ClassScores>> = vec![Vec::new(); vars.len()];
    for run in 0..runs {
        let seed = base.seed + run as u64;
        let mut detectors: BTreeMap<String, Detector> = BTreeMap::new();
        let mut aux: Option<AuxSeg> = None;
        for (i, v) in vars.iter().enumerate() {
            let mut cfg = v.cfg.clone();
            cfg.train.seed = seed;
            cfg.aux_train.seed = seed;
            cfg.post.seed = seed;
            let key = serde_json::to_string(&cfg.model)?;
            if !detectors.contains_key(&key) {
                log::info!("ablation {axis}={}: training detector (run {run})", v.label);
                let (det, _) = train_detector(&cfg, data, None)?;
                detectors.insert(key.clone(), det);
            }
            let det = &detectors[&key];
            let outcome = match v.head {
                None => evaluate_models(&cfg, Models::detector_only(det), &data.test)?,
                Some(source) => {
                    if aux.is_none() && (source == PseudoSource::Cross || cfg.post.use_me) {
                        log::info!("ablation {axis}: training aux model (run {run})");
                        aux = Some(train_aux_model(&cfg, data)?.0);
                    }
                    let (head, _, _) = post_train(&cfg, det, aux.as_ref(), data)?;
                    let models = Models {
                        detector: det,
                        aux: aux.as_ref(),
                        head: Some(&head),
                    };
                    evaluate_models(&cfg, models, &data.test)?
                }
            };
            log::info!("ablation {axis}={} run {run}: F1 {:.4}", v.label, outcome.scores.average_f1);
            scores[i].push(outcome.scores);
        }
    }
    let rows = vars
        .iter()
        .zip(scores)
        .map(|(v, runs)| {
            Ok(AblationRow {
                value: v.label.clone(),
                mean: mean_scores(&runs),
                intervals: if runs.len() > 1 { Some(run_intervals(&runs)?) } else { None },
                runs,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Ablation { axis, rows })
}
