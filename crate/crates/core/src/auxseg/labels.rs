use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::numerics::Tensor;

/// `H x W` category map; value `categories` marks background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoMask {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<usize>,
}

/// Disks of radius `rho` around each point. A pixel (center at `j+0.5, i+0.5`)
/// takes the category of its nearest point within `rho`; equal distances go to
/// the lower index.
pub fn rasterize_pseudo_masks(points: &[(f64, f64, usize)], h: usize, w: usize, rho: f64, categories: usize) -> PseudoMask {
    let mut labels = vec![categories; h * w];
    for i in 0..h {
        for j in 0..w {
            let (cx, cy) = (j as f64 + 0.5, i as f64 + 0.5);
            let mut best: Option<(f64, usize)> = None;
            for &(x, y, cat) in points {
                let d2 = (cx - x).powi(2) + (cy - y).powi(2);
                if d2 <= rho * rho && best.is_none_or(|(b, _)| d2 < b) {
                    best = Some((d2, cat));
                }
            }
            if let Some((_, cat)) = best {
                labels[i * w + j] = cat;
            }
        }
    }
    PseudoMask { h, w, labels }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteMode {
    /// Majority of per-pixel argmax over the 3x3 neighborhood.
    Majority3x3,
    SinglePixel,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossLabel {
    /// `None` when the vote lands on background.
    pub category: Option<usize>,
    /// Fraction of voting pixels that agree with the winner.
    pub agreement: f64,
    /// Mean softmax probability of the winner over voting pixels.
    pub confidence: f64,
}

/// Pixel containing a window-local coordinate, clamped to the map.
pub fn pixel_of(x: f64, y: f64, h: usize, w: usize) -> (usize, usize) {
    let i = (y.floor().max(0.0) as usize).min(h - 1);
    let j = (x.floor().max(0.0) as usize).min(w - 1);
    (i, j)
}

/// Labels each coordinate from a `[H,W,C+1]` logit map.
pub fn cross_label(map: &Tensor<f32>, coords: &[(f64, f64)], mode: VoteMode) -> Result<Vec<CrossLabel>> {
    let s = map.shape();
    if s.len() != 3 || s[2] < 2 {
        return Err(Error::shape("cross_label", format!("map {s:?}")));
    }
    let (h, w, k) = (s[0], s[1], s[2]);
    let background = k - 1;
    let data = map.data();
    coords
        .iter()
        .map(|&(x, y)| {
            if !(x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64) {
                return Err(Error::OutOfRange(format!("coordinate ({x}, {y}) in a {h}x{w} map")));
            }
            let (ci, cj) = pixel_of(x, y, h, w);
            let radius = if mode == VoteMode::SinglePixel { 0 } else { 1 };
            let mut votes = vec![0usize; k];
            let mut prob = vec![0.0f64; k];
            let mut n = 0;
            for i in ci.saturating_sub(radius)..=(ci + radius).min(h - 1) {
                for j in cj.saturating_sub(radius)..=(cj + radius).min(w - 1) {
                    let px = &data[(i * w + j) * k..(i * w + j + 1) * k];
                    let p = kernels::softmax(px, k);
                    votes[crate::model::detector::argmax(px)] += 1;
                    for c in 0..k {
                        prob[c] += p[c] as f64;
                    }
                    n += 1;
                }
            }
            // Highest vote wins; ties go to the lower index, so background
            // (last) only wins outright.
            let mut win = 0;
            for c in 1..k {
                if votes[c] > votes[win] {
                    win = c;
                }
            }
            Ok(CrossLabel {
                category: (win != background).then_some(win),
                agreement: votes[win] as f64 / n as f64,
                confidence: prob[win] / n as f64,
            })
        })
        .collect()
}

/// Bilinear sample of morphology features `[H',W',d_m]` at a window-local
/// coordinate of a `patch_h x patch_w` window. Feature pixel `(i,j)` sits at
/// window coordinate `((j+0.5)/scale, (i+0.5)/scale)`.
pub fn morph_embed(mf: &Tensor<f32>, patch_h: usize, patch_w: usize, x: f64, y: f64) -> Result<Vec<f32>> {
    let s = mf.shape();
    if s.len() != 3 {
        return Err(Error::shape("morph_embed", format!("features {s:?}")));
    }
    if !(x >= 0.0 && y >= 0.0 && x < patch_w as f64 && y < patch_h as f64) {
        return Err(Error::OutOfRange(format!("coordinate ({x}, {y}) in a {patch_h}x{patch_w} window")));
    }
    let sx = s[1] as f64 / patch_w as f64;
    let sy = s[0] as f64 / patch_h as f64;
    Ok(kernels::bilinear_sample(mf.data(), s[0], s[1], s[2], &[(x * sx - 0.5, y * sy - 0.5)]))
}
