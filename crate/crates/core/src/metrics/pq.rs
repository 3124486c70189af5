use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `h x w` instance ids, 0 for background; `categories[id - 1]` is the
/// category of instance `id`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceMap {
    pub h: usize,
    pub w: usize,
    pub ids: Vec<u32>,
    pub categories: Vec<usize>,
}

impl InstanceMap {
    pub fn new(h: usize, w: usize, ids: Vec<u32>, categories: Vec<usize>) -> Result<Self> {
        let m = InstanceMap { h, w, ids, categories };
        m.validate()?;
        Ok(m)
    }

    pub fn instances(&self) -> usize {
        self.categories.len()
    }

    /// Ids must be exactly `1..=instances()`, each present at least once.
    pub fn validate(&self) -> Result<()> {
        if self.ids.len() != self.h * self.w {
            return Err(Error::shape("instance_map", format!("{} ids for {}x{}", self.ids.len(), self.h, self.w)));
        }
        let n = self.instances();
        let mut seen = vec![false; n];
        for &id in &self.ids {
            if id as usize > n {
                return Err(Error::OutOfRange(format!("instance id {id} without a category (have {n})")));
            }
            if id > 0 {
                seen[id as usize - 1] = true;
            }
        }
        if let Some(i) = seen.iter().position(|&s| !s) {
            return Err(Error::Format {
                what: "instance map",
                detail: format!("instance id {} has no pixels; ids must be contiguous", i + 1),
            });
        }
        Ok(())
    }

    fn areas(&self) -> Vec<usize> {
        let mut a = vec![0; self.instances() + 1];
        for &id in &self.ids {
            a[id as usize] += 1;
        }
        a
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PqCategory {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_sum: f64,
    /// `None` when the category has no instances on either side.
    pub pq: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PqScores {
    pub per_category: Vec<PqCategory>,
    /// Mean over categories with at least one instance; 0 when there are none.
    pub average: f64,
}

/// Panoptic Quality with matches at IoU strictly above 0.5.
pub fn panoptic_quality(pred: &InstanceMap, gt: &InstanceMap, categories: usize) -> Result<PqScores> {
    pred.validate()?;
    gt.validate()?;
    if (pred.h, pred.w) != (gt.h, gt.w) {
        return Err(Error::shape(
            "panoptic_quality",
            format!("prediction {}x{} vs ground truth {}x{}", pred.h, pred.w, gt.h, gt.w),
        ));
    }
    if let Some(&c) = pred.categories.iter().chain(&gt.categories).find(|&&c| c >= categories) {
        return Err(Error::OutOfRange(format!("instance category {c} (categories: {categories})")));
    }
    let pa = pred.areas();
    let ga = gt.areas();
    let mut inter: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&p, &g) in pred.ids.iter().zip(&gt.ids) {
        if p > 0 && g > 0 {
            *inter.entry((p, g)).or_default() += 1;
        }
    }
    let mut pred_hit = vec![false; pred.instances() + 1];
    let mut gt_hit = vec![false; gt.instances() + 1];
    let mut per_category = vec![PqCategory::default(); categories];
    for (&(p, g), &i) in &inter {
        let c = pred.categories[p as usize - 1];
        if c != gt.categories[g as usize - 1] {
            continue;
        }
        let union = pa[p as usize] + ga[g as usize] - i;
        let iou = i as f64 / union as f64;
        if iou > 0.5 {
            if pred_hit[p as usize] || gt_hit[g as usize] {
                return Err(Error::Runtime(format!("instance matched twice (pred {p}, gt {g})")));
            }
            pred_hit[p as usize] = true;
            gt_hit[g as usize] = true;
            per_category[c].tp += 1;
            per_category[c].iou_sum += iou;
        }
    }
    for p in 1..=pred.instances() {
        if !pred_hit[p] {
            per_category[pred.categories[p - 1]].fp += 1;
        }
    }
    for g in 1..=gt.instances() {
        if !gt_hit[g] {
            per_category[gt.categories[g - 1]].fn_ += 1;
        }
    }
    for s in &mut per_category {
        let denom = s.tp as f64 + 0.5 * s.fp as f64 + 0.5 * s.fn_ as f64;
        s.pq = (denom > 0.0).then(|| s.iou_sum / denom);
    }
    let scored: Vec<f64> = per_category.iter().filter_map(|s| s.pq).collect();
    let average = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(PqScores { per_category, average })
}
