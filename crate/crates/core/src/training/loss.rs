use serde::{Deserialize, Serialize};

use crate::data::PointAnnotation;
use crate::error::{Error, Result};
use crate::model::detector::Decoded;
use crate::model::Proposal;
use crate::numerics::{kernels, Tape, Tensor, Var};

use super::hungarian::{hungarian, MatchAssignment};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Regression weight on squared pixel distance.
    pub lambda_loc: f64,
    pub lambda_cls: f64,
    /// Matching cost per pixel of distance.
    pub w_dist: f64,
    /// Matching cost on `1 - p(gt class)`.
    pub w_cls: f64,
    /// Cross-entropy weight of unmatched proposals.
    pub background_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_loc: 2e-3,
            lambda_cls: 1.0,
            w_dist: 0.05,
            w_cls: 1.0,
            background_weight: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_loc, self.lambda_cls, self.w_dist, self.w_cls, self.background_weight];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// A ground-truth point in window-local pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub x: f64,
    pub y: f64,
    pub category: usize,
}

impl From<&PointAnnotation> for Target {
    fn from(a: &PointAnnotation) -> Self {
        Target {
            x: a.x,
            y: a.y,
            category: a.category,
        }
    }
}

/// Hungarian matching of proposals (rows) to targets (columns).
pub fn match_proposals(proposals: &[Proposal], gts: &[Target], w: &LossWeights) -> Result<MatchAssignment> {
    if gts.len() > proposals.len() {
        return Err(Error::Config(format!(
            "{} annotated nuclei but only {} proposals; anchor density is too low",
            gts.len(),
            proposals.len()
        )));
    }
    let cost: Vec<Vec<f64>> = proposals
        .iter()
        .map(|p| {
            let (px, py) = p.point();
            let prob = kernels::softmax(&p.logits, p.logits.len());
            gts.iter()
                .map(|g| {
                    let d = (px as f64 - g.x).hypot(py as f64 - g.y);
                    w.w_dist * d + w.w_cls * (1.0 - prob[g.category] as f64)
                })
                .collect()
        })
        .collect();
    if gts.is_empty() {
        return Ok(MatchAssignment {
            pairs: Vec::new(),
            unmatched_rows: (0..proposals.len()).collect(),
            unmatched_cols: Vec::new(),
        });
    }
    hungarian(&cost)
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cls: Var,
    pub loc: Var,
    pub total: Var,
}

/// Class-weighted cross-entropy (normalized by the weight sum) plus
/// `lambda_loc` times the mean squared distance over matched pairs.
/// Unmatched proposals are pushed toward the background class `C`.
pub fn detection_loss(
    tape: &mut Tape<f32>,
    out: &Decoded,
    anchors: &[(f32, f32)],
    assignment: &MatchAssignment,
    gts: &[Target],
    w: &LossWeights,
) -> Result<LossVars> {
    let p = anchors.len();
    let classes = tape.shape(out.logits)[1];
    let background = classes - 1;
    let mut targets = vec![background; p];
    let mut weights = vec![w.background_weight as f32; p];
    for &(i, j) in &assignment.pairs {
        targets[i] = gts[j].category;
        weights[i] = 1.0;
    }
    let weight_sum: f64 = weights.iter().map(|&v| v as f64).sum();
    let logp = tape.log_softmax(out.logits)?;
    let picked = tape.pick(logp, &targets)?;
    let wv = tape.constant(Tensor::new(vec![p], weights)?);
    let weighted = tape.mul(picked, wv)?;
    let ce = tape.sum(weighted)?;
    let cls = tape.scale(ce, -w.lambda_cls / weight_sum.max(f64::MIN_POSITIVE))?;
    let loc = if assignment.pairs.is_empty() {
        tape.constant(Tensor::zeros(vec![1]))
    } else {
        let rows: Vec<usize> = assignment.pairs.iter().map(|&(i, _)| i).collect();
        let off = tape.gather_rows(out.offsets, &rows)?;
        let mut goal = Vec::with_capacity(rows.len() * 2);
        for &(i, j) in &assignment.pairs {
            goal.push((gts[j].x - anchors[i].0 as f64) as f32);
            goal.push((gts[j].y - anchors[i].1 as f64) as f32);
        }
        let g = tape.constant(Tensor::new(vec![rows.len(), 2], goal)?);
        let diff = tape.sub(off, g)?;
        let sq = tape.square(diff)?;
        let s = tape.sum(sq)?;
        tape.scale(s, w.lambda_loc / rows.len() as f64)?
    };
    let total = tape.add(cls, loc)?;
    Ok(LossVars { cls, loc, total })
}
