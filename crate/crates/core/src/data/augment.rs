//! Dihedral augmentation applied coherently to a whole neighborhood: every
//! patch is transformed and the patches are moved to their transformed grid
//! offsets, so the spatial arrangement of context stays consistent.

use super::slide::{NeighborhoodSample, PointAnnotation, CHANNELS};

/// Optional horizontal flip followed by `rot` quarter turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dihedral {
    pub flip: bool,
    pub rot: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { flip: false, rot: 0 };

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8u8).map(|i| Dihedral { flip: i >= 4, rot: i % 4 })
    }

    /// Maps a centered offset `(u, v)` (x right, y down).
    pub fn apply_offset(&self, u: f64, v: f64) -> (f64, f64) {
        let (mut u, mut v) = if self.flip { (-u, v) } else { (u, v) };
        for _ in 0..self.rot % 4 {
            (u, v) = (v, -u);
        }
        (u, v)
    }

    fn inverse_offset(&self, u: f64, v: f64) -> (f64, f64) {
        let (mut u, mut v) = (u, v);
        for _ in 0..self.rot % 4 {
            (u, v) = (-v, u);
        }
        if self.flip {
            (-u, v)
        } else {
            (u, v)
        }
    }

    /// Window-local point in a square `side x side` window.
    pub fn apply_point(&self, x: f64, y: f64, side: usize) -> (f64, f64) {
        let half = side as f64 / 2.0;
        let (u, v) = self.apply_offset(x - half, y - half);
        (u + half, v + half)
    }

    /// HWC image of a square window; pixel centers map onto pixel centers.
    pub fn apply_image(&self, px: &[u8], side: usize) -> Vec<u8> {
        let half = side as f64 / 2.0;
        let mut out = vec![0u8; px.len()];
        for i in 0..side {
            for j in 0..side {
                let (u, v) = self.inverse_offset(j as f64 + 0.5 - half, i as f64 + 0.5 - half);
                let sj = (u + half - 0.5).round() as usize;
                let si = (v + half - 0.5).round() as usize;
                let (o, s) = ((i * side + j) * CHANNELS, (si * side + sj) * CHANNELS);
                out[o..o + CHANNELS].copy_from_slice(&px[s..s + CHANNELS]);
            }
        }
        out
    }

    /// Transformed neighborhood; requires square windows.
    pub fn apply_neighborhood(&self, n: &NeighborhoodSample, side: usize) -> NeighborhoodSample {
        let w = 2 * n.delta + 1;
        let d = n.delta as f64;
        let mut patches = vec![Vec::new(); w * w];
        let mut presence = vec![false; w * w];
        for j in 0..w {
            for k in 0..w {
                let (u, v) = self.apply_offset(k as f64 - d, j as f64 - d);
                let (nk, nj) = ((u + d).round() as usize, (v + d).round() as usize);
                patches[nj * w + nk] = self.apply_image(&n.patches[j * w + k], side);
                presence[nj * w + nk] = n.presence[j * w + k];
            }
        }
        let annotations = n
            .annotations
            .iter()
            .map(|a| {
                let (x, y) = self.apply_point(a.x, a.y, side);
                PointAnnotation { x, y, ..*a }
            })
            .collect();
        NeighborhoodSample {
            center: n.center,
            delta: n.delta,
            patches,
            presence,
            annotations,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_turn_moves_pixels_and_points_together() {
        let side = 4;
        let mut px = vec![0u8; side * side * 3];
        // Mark pixel (row 0, col 3): center (3.5, 0.5).
        px[(3) * 3] = 255;
        let t = Dihedral { flip: false, rot: 1 };
        let out = t.apply_image(&px, side);
        let (x, y) = t.apply_point(3.5, 0.5, side);
        let (i, j) = (y.floor() as usize, x.floor() as usize);
        assert_eq!(out[(i * side + j) * 3], 255);
        assert_eq!(out.iter().filter(|&&b| b == 255).count(), 1);
    }

    #[test]
    fn four_turns_and_double_flip_are_identity() {
        let px: Vec<u8> = (0..5 * 5 * 3).map(|i| i as u8).collect();
        let r = Dihedral { flip: false, rot: 1 };
        let mut cur = px.clone();
        for _ in 0..4 {
            cur = r.apply_image(&cur, 5);
        }
        assert_eq!(cur, px);
        let f = Dihedral { flip: true, rot: 0 };
        assert_eq!(f.apply_image(&f.apply_image(&px, 5), 5), px);
    }

    #[test]
    fn flip_mirrors_the_neighbor_arrangement() {
        let n = NeighborhoodSample {
            center: (1, 1),
            delta: 1,
            patches: (0..9).map(|i| vec![i as u8; 2 * 2 * 3]).collect(),
            presence: vec![true; 9],
            annotations: vec![PointAnnotation { r: 1, c: 1, x: 0.25, y: 1.5, category: 0 }],
        };
        let t = Dihedral { flip: true, rot: 0 };
        let m = t.apply_neighborhood(&n, 2);
        // Left neighbor (index 3) now sits on the right (index 5).
        assert_eq!(m.patches[5][0], 3);
        assert_eq!(m.patches[4][0], 4);
        assert_eq!(m.annotations[0].x, 1.75);
        assert_eq!(m.annotations[0].y, 1.5);
    }

    #[test]
    fn all_eight_elements_are_distinct() {
        let px: Vec<u8> = (0..3 * 3 * 3).map(|i| i as u8).collect();
        let images: std::collections::BTreeSet<Vec<u8>> = Dihedral::all().map(|t| t.apply_image(&px, 3)).collect();
        assert_eq!(images.len(), 8);
    }
}
