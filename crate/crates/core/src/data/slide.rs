use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// A slide tiled into an `rows x cols` grid of `patch_h x patch_w` RGB windows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlideGrid {
    pub slide_id: String,
    pub rows: usize,
    pub cols: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// Row-major windows, each `patch_h * patch_w * 3` bytes (HWC).
    pub patches: Vec<Vec<u8>>,
}

impl SlideGrid {
    pub fn new(slide_id: impl Into<String>, rows: usize, cols: usize, patch_h: usize, patch_w: usize, patches: Vec<Vec<u8>>) -> Result<Self> {
        if rows == 0 || cols == 0 || patch_h == 0 || patch_w == 0 {
            return Err(Error::Config(format!("empty slide {rows}x{cols} of {patch_h}x{patch_w} windows")));
        }
        if patches.len() != rows * cols {
            return Err(Error::shape("slide", format!("{} patches for a {rows}x{cols} grid", patches.len())));
        }
        let len = patch_h * patch_w * CHANNELS;
        if let Some(i) = patches.iter().position(|p| p.len() != len) {
            return Err(Error::shape("slide", format!("patch {i} has {} bytes, expected {len}", patches[i].len())));
        }
        Ok(SlideGrid {
            slide_id: slide_id.into(),
            rows,
            cols,
            patch_h,
            patch_w,
            patches,
        })
    }

    pub fn patch_bytes(&self) -> usize {
        self.patch_h * self.patch_w * CHANNELS
    }

    pub fn contains(&self, r: i64, c: i64) -> bool {
        r >= 0 && c >= 0 && (r as usize) < self.rows && (c as usize) < self.cols
    }

    pub fn patch(&self, r: usize, c: usize) -> &[u8] {
        &self.patches[r * self.cols + c]
    }

    /// Grid positions of the `(2δ+1)²` neighborhood in row-major `(j,k)`
    /// order; `None` where the neighbor falls outside the slide.
    pub fn neighbor_positions(&self, r: usize, c: usize, delta: usize) -> Vec<Option<(usize, usize)>> {
        let d = delta as i64;
        let mut out = Vec::with_capacity((2 * delta + 1).pow(2));
        for j in -d..=d {
            for k in -d..=d {
                let (rr, cc) = (r as i64 + j, c as i64 + k);
                out.push(self.contains(rr, cc).then_some((rr as usize, cc as usize)));
            }
        }
        out
    }

    /// Order-sensitive SHA-256 of all pixel bytes.
    pub fn pixel_checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in &self.patches {
            h.update(p);
        }
        hex::encode(h.finalize())
    }
}

/// A nucleus centroid in window-local pixels (origin top-left).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub r: usize,
    pub c: usize,
    pub x: f64,
    pub y: f64,
    pub category: usize,
}

impl PointAnnotation {
    pub fn validate(&self, slide: &SlideGrid, categories: usize) -> Result<()> {
        let inside = self.x >= 0.0 && self.y >= 0.0 && self.x < slide.patch_w as f64 && self.y < slide.patch_h as f64;
        if self.r >= slide.rows || self.c >= slide.cols || !inside || self.category >= categories {
            return Err(Error::OutOfRange(format!("annotation {self:?}")));
        }
        Ok(())
    }
}

/// Annotations of window `(r, c)`, in input order.
pub fn window_annotations(all: &[PointAnnotation], r: usize, c: usize) -> Vec<PointAnnotation> {
    all.iter().filter(|a| a.r == r && a.c == c).copied().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodSample {
    pub center: (usize, usize),
    pub delta: usize,
    /// `(2δ+1)²` buffers in row-major `(j,k)` order; absent ones zero-filled.
    pub patches: Vec<Vec<u8>>,
    pub presence: Vec<bool>,
    pub annotations: Vec<PointAnnotation>,
}

impl NeighborhoodSample {
    pub fn center_index(&self) -> usize {
        let side = 2 * self.delta + 1;
        side * self.delta + self.delta
    }
}

pub fn neighborhood(slide: &SlideGrid, annotations: &[PointAnnotation], r: usize, c: usize, delta: usize) -> Result<NeighborhoodSample> {
    if r >= slide.rows || c >= slide.cols {
        return Err(Error::OutOfRange(format!("window ({r},{c}) in a {}x{} slide", slide.rows, slide.cols)));
    }
    let positions = slide.neighbor_positions(r, c, delta);
    let zero = vec![0u8; slide.patch_bytes()];
    Ok(NeighborhoodSample {
        center: (r, c),
        delta,
        patches: positions
            .iter()
            .map(|p| p.map_or_else(|| zero.clone(), |(rr, cc)| slide.patch(rr, cc).to_vec()))
            .collect(),
        presence: positions.iter().map(Option::is_some).collect(),
        annotations: window_annotations(annotations, r, c),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: usize, cols: usize) -> SlideGrid {
        let patches = (0..rows * cols).map(|i| vec![i as u8; 2 * 2 * 3]).collect();
        SlideGrid::new("t", rows, cols, 2, 2, patches).unwrap()
    }

    #[test]
    fn interior_window_has_nine_present_neighbors() {
        let g = grid(3, 3);
        let n = neighborhood(&g, &[], 1, 1, 1).unwrap();
        assert_eq!(n.patches.len(), 9);
        assert!(n.presence.iter().all(|&p| p));
        assert_eq!(n.patches[n.center_index()], g.patch(1, 1));
    }

    #[test]
    fn corner_window_zero_fills_five() {
        let g = grid(3, 3);
        let n = neighborhood(&g, &[], 0, 0, 1).unwrap();
        assert_eq!(n.presence.iter().filter(|&&p| p).count(), 4);
        for (p, present) in n.patches.iter().zip(&n.presence) {
            if !present {
                assert!(p.iter().all(|&b| b == 0));
            }
        }
        assert_eq!(n.presence, [false, false, false, false, true, true, false, true, true]);
    }

    #[test]
    fn zero_radius_is_the_center_alone() {
        let g = grid(2, 3);
        let a = PointAnnotation { r: 1, c: 2, x: 0.5, y: 1.0, category: 0 };
        let n = neighborhood(&g, &[a], 1, 2, 0).unwrap();
        assert_eq!(n.patches, vec![g.patch(1, 2).to_vec()]);
        assert_eq!(n.annotations, vec![a]);
    }

    #[test]
    fn out_of_range_center_is_an_error() {
        assert!(matches!(neighborhood(&grid(2, 2), &[], 2, 0, 1), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn patch_size_is_checked() {
        assert!(SlideGrid::new("t", 1, 1, 2, 2, vec![vec![0; 5]]).is_err());
        assert!(SlideGrid::new("t", 1, 2, 2, 2, vec![vec![0; 12]]).is_err());
    }
}
