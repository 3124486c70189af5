use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::hungarian;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub category: usize,
}

impl Point {
    pub fn new(x: f64, y: f64, category: usize) -> Self {
        Point { x, y, category }
    }

    pub fn dist(&self, o: &Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    Greedy,
    Optimal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyCategory {
    /// Categories with no predictions and no ground truth leave the average.
    Exclude,
    /// Such categories score F = 1.
    One,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub sigma: f64,
    pub rule: MatchRule,
    pub categories: usize,
    /// Match ignoring class first, then count class mismatches as errors.
    pub class_agnostic: bool,
    pub empty: EmptyCategory,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sigma: 6.0,
            rule: MatchRule::Greedy,
            categories: 3,
            class_agnostic: false,
            empty: EmptyCategory::Exclude,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("match radius must be positive, got {}", self.sigma)));
        }
        if self.categories == 0 {
            return Err(Error::Config("at least one category is required".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DetectionAssignment {
    /// Matched `(pred, gt)` index pairs, sorted.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
    pub per_category: Vec<CategoryCounts>,
}

/// One-to-one matching of `preds` to `gts` among candidates within `sigma`.
/// Returns local `(pred, gt)` pairs.
pub fn match_points(preds: &[Point], gts: &[Point], sigma: f64, rule: MatchRule) -> Result<Vec<(usize, usize)>> {
    let mut cand = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let d = p.dist(g);
            if d <= sigma {
                cand.push((d, i, j));
            }
        }
    }
    if cand.is_empty() {
        return Ok(Vec::new());
    }
    match rule {
        MatchRule::Greedy => {
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut pu = vec![false; preds.len()];
            let mut gu = vec![false; gts.len()];
            let mut out = Vec::new();
            for (_, i, j) in cand {
                if !pu[i] && !gu[j] {
                    pu[i] = true;
                    gu[j] = true;
                    out.push((i, j));
                }
            }
            out.sort_unstable();
            Ok(out)
        }
        MatchRule::Optimal => {
            // Non-candidates cost more than any complete set of candidates,
            // so the optimum first maximizes the match count and then
            // minimizes total distance.
            let big = sigma * (preds.len().min(gts.len()) as f64 + 1.0) + 1.0;
            let mut cost = vec![vec![big; gts.len()]; preds.len()];
            for &(d, i, j) in &cand {
                cost[i][j] = d;
            }
            let a = hungarian(&cost)?;
            Ok(a.pairs.into_iter().filter(|&(i, j)| cost[i][j] < big).collect())
        }
    }
}

fn check_categories(points: &[Point], categories: usize, what: &str) -> Result<()> {
    match points.iter().find(|p| p.category >= categories || !p.x.is_finite() || !p.y.is_finite()) {
        Some(p) => Err(Error::OutOfRange(format!(
            "{what} point ({}, {}) with category {} (categories: {categories})",
            p.x, p.y, p.category
        ))),
        None => Ok(()),
    }
}

/// Per-category σ-matching of predictions to ground truth.
pub fn match_detections(preds: &[Point], gts: &[Point], cfg: &EvalConfig) -> Result<DetectionAssignment> {
    cfg.validate()?;
    check_categories(preds, cfg.categories, "predicted")?;
    check_categories(gts, cfg.categories, "ground-truth")?;
    let mut pairs = Vec::new();
    let mut per_category = vec![CategoryCounts::default(); cfg.categories];
    // Points that took part in any pair, including class-mismatched ones.
    let mut paired_p = vec![false; preds.len()];
    let mut paired_g = vec![false; gts.len()];
    if cfg.class_agnostic {
        for (i, j) in match_points(preds, gts, cfg.sigma, cfg.rule)? {
            paired_p[i] = true;
            paired_g[j] = true;
            let (pc, gc) = (preds[i].category, gts[j].category);
            if pc == gc {
                pairs.push((i, j));
            } else {
                per_category[pc].fp += 1;
                per_category[gc].fn_ += 1;
            }
        }
    } else {
        for c in 0..cfg.categories {
            let pi: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].category == c).collect();
            let gi: Vec<usize> = (0..gts.len()).filter(|&j| gts[j].category == c).collect();
            let p: Vec<Point> = pi.iter().map(|&i| preds[i]).collect();
            let g: Vec<Point> = gi.iter().map(|&j| gts[j]).collect();
            for (a, b) in match_points(&p, &g, cfg.sigma, cfg.rule)? {
                pairs.push((pi[a], gi[b]));
                paired_p[pi[a]] = true;
                paired_g[gi[b]] = true;
            }
        }
    }
    pairs.sort_unstable();
    let mut pm = vec![false; preds.len()];
    let mut gm = vec![false; gts.len()];
    for &(i, j) in &pairs {
        pm[i] = true;
        gm[j] = true;
        per_category[gts[j].category].tp += 1;
    }
    let unmatched_preds: Vec<usize> = (0..preds.len()).filter(|&i| !pm[i]).collect();
    let unmatched_gts: Vec<usize> = (0..gts.len()).filter(|&j| !gm[j]).collect();
    for i in (0..preds.len()).filter(|&i| !paired_p[i]) {
        per_category[preds[i].category].fp += 1;
    }
    for j in (0..gts.len()).filter(|&j| !paired_g[j]) {
        per_category[gts[j].category].fn_ += 1;
    }
    Ok(DetectionAssignment {
        pairs,
        unmatched_preds,
        unmatched_gts,
        per_category,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    /// `None` when the category is empty and excluded.
    pub f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub per_category: Vec<CategoryScore>,
    /// Unweighted mean of the scored categories; 0 when none is scored.
    pub average_f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f1_from_counts(counts: &[CategoryCounts], empty: EmptyCategory) -> ClassScores {
    let per_category: Vec<CategoryScore> = counts
        .iter()
        .map(|c| {
            let f1 = if c.tp + c.fp + c.fn_ == 0 {
                match empty {
                    EmptyCategory::Exclude => None,
                    EmptyCategory::One => Some(1.0),
                }
            } else {
                Some(2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64)
            };
            CategoryScore {
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
                precision: ratio(c.tp, c.tp + c.fp),
                recall: ratio(c.tp, c.tp + c.fn_),
                f1,
            }
        })
        .collect();
    let scored: Vec<f64> = per_category.iter().filter_map(|s| s.f1).collect();
    let average_f1 = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    ClassScores { per_category, average_f1 }
}

pub fn f1_scores(assignment: &DetectionAssignment, empty: EmptyCategory) -> ClassScores {
    f1_from_counts(&assignment.per_category, empty)
}

/// Sums counts category-wise, e.g. over the windows or slides of a split.
pub fn merge_counts(into: &mut Vec<CategoryCounts>, other: &[CategoryCounts]) {
    if into.len() < other.len() {
        into.resize(other.len(), CategoryCounts::default());
    }
    for (a, b) in into.iter_mut().zip(other) {
        a.tp += b.tp;
        a.fp += b.fp;
        a.fn_ += b.fn_;
    }
}
