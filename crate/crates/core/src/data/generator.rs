//! Synthetic slides whose two "ambiguous" categories look identical and are
//! decided by how crowded the surrounding windows are.
//!
//! Every window draws its nucleus count iid from `count_min..=count_max`.
//! Nuclei that are not of a visually distinct category get label 0 when the
//! ring of in-grid neighbors is dense (count rescaled to a full ring of 8
//! exceeds `t_nb`) and label 1 otherwise. The window's own count and pixels
//! are independent of that ring, so the window alone says nothing about 0/1.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::slide::{PointAnnotation, SlideGrid, CHANNELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub count_min: usize,
    pub count_max: usize,
    /// Density threshold on the ring count scaled to 8 neighbors.
    pub t_nb: usize,
    pub categories: usize,
    /// Probability that a nucleus belongs to a visually distinct category
    /// (only when `categories >= 3`).
    pub distinct_fraction: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let mut cfg = GeneratorConfig {
            seed: 17,
            rows: 8,
            cols: 8,
            patch_h: 64,
            patch_w: 64,
            radius_min: 3.0,
            radius_max: 5.0,
            count_min: 1,
            count_max: 7,
            t_nb: 0,
            categories: 3,
            distinct_fraction: 0.3,
        };
        cfg.t_nb = cfg.balanced_threshold();
        cfg
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rows == 0 || self.cols == 0 {
            return bad(format!("empty grid {}x{}", self.rows, self.cols));
        }
        if self.radius_min < 2.0 || self.radius_max < self.radius_min {
            return bad(format!("radius range [{}, {}]", self.radius_min, self.radius_max));
        }
        if 2.0 * (self.radius_max + 1.0) >= self.patch_h.min(self.patch_w) as f64 {
            return bad(format!(
                "nuclei of radius {} do not fit a {}x{} window",
                self.radius_max, self.patch_h, self.patch_w
            ));
        }
        if self.count_max < self.count_min {
            return bad(format!("count range [{}, {}]", self.count_min, self.count_max));
        }
        if self.categories < 2 {
            return bad(format!("{} categories, need at least 2", self.categories));
        }
        if !(0.0..=1.0).contains(&self.distinct_fraction) {
            return bad(format!("distinct fraction {}", self.distinct_fraction));
        }
        Ok(())
    }

    /// Distribution of the sum of 8 iid window counts, indexed by total.
    fn ring_distribution(&self) -> Vec<f64> {
        let n = self.count_max - self.count_min + 1;
        let mut dist = vec![1.0];
        for _ in 0..8 {
            let mut next = vec![0.0; dist.len() + self.count_max];
            for (t, p) in dist.iter().enumerate() {
                for c in self.count_min..=self.count_max {
                    next[t + c] += p / n as f64;
                }
            }
            dist = next;
        }
        dist
    }

    /// Threshold whose 0-label probability for an interior window is closest
    /// to one half (the smaller threshold wins ties).
    pub fn balanced_threshold(&self) -> usize {
        let dist = self.ring_distribution();
        let mut best = (f64::INFINITY, 0);
        for t in 0..dist.len() {
            let above: f64 = dist[t + 1..].iter().sum();
            let gap = (above - 0.5).abs();
            if gap < best.0 - 1e-12 {
                best = (gap, t);
            }
        }
        best.1
    }
}

/// 0/1 rule for a window given its in-grid ring count and ring size.
pub fn ambiguous_label(ring_count: usize, ring_present: usize, t_nb: usize) -> usize {
    if ring_present > 0 && ring_count * 8 > t_nb * ring_present {
        0
    } else {
        1
    }
}

/// Per-window ring counts and ring sizes derived from per-window nucleus counts.
pub fn ring_counts(counts: &[usize], rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows as i64 {
        for c in 0..cols as i64 {
            let (mut total, mut present) = (0, 0);
            for j in -1..=1i64 {
                for k in -1..=1i64 {
                    let (rr, cc) = (r + j, c + k);
                    if (j, k) == (0, 0) || rr < 0 || cc < 0 || rr >= rows as i64 || cc >= cols as i64 {
                        continue;
                    }
                    total += counts[rr as usize * cols + cc as usize];
                    present += 1;
                }
            }
            out.push((total, present));
        }
    }
    out
}

struct Nucleus {
    x: f64,
    y: f64,
    radius: f64,
    distinct: Option<usize>,
    tint: [f64; 3],
}

const BACKGROUND: [f64; 3] = [232.0, 204.0, 218.0];
const NUCLEUS: [f64; 3] = [120.0, 72.0, 158.0];
const CORE: [f64; 3] = [48.0, 22.0, 80.0];

fn place(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng, count: usize) -> Result<Vec<Nucleus>> {
    let distinct_categories = cfg.categories.saturating_sub(2);
    let mut out: Vec<Nucleus> = Vec::with_capacity(count);
    for _ in 0..count {
        let radius = rng.random_range(cfg.radius_min..=cfg.radius_max);
        let distinct = (distinct_categories > 0 && rng.random_bool(cfg.distinct_fraction))
            .then(|| 2 + rng.random_range(0..distinct_categories));
        let jitter = rng.random_range(-15.0..15.0);
        let tint = [jitter, 0.6 * jitter, jitter];
        let mut placed = false;
        for _ in 0..2000 {
            let lo = radius + 1.0;
            let x = rng.random_range(lo..cfg.patch_w as f64 - lo);
            let y = rng.random_range(lo..cfg.patch_h as f64 - lo);
            let clear = out
                .iter()
                .all(|n| ((n.x - x).powi(2) + (n.y - y).powi(2)).sqrt() >= n.radius + radius + 2.0);
            if clear {
                out.push(Nucleus { x, y, radius, distinct, tint });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Config(format!(
                "cannot place {count} non-overlapping nuclei in a {}x{} window",
                cfg.patch_h, cfg.patch_w
            )));
        }
    }
    Ok(out)
}

fn render(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng, nuclei: &[Nucleus]) -> Vec<u8> {
    let (h, w) = (cfg.patch_h, cfg.patch_w);
    let mut px = vec![0u8; h * w * CHANNELS];
    for i in 0..h {
        for j in 0..w {
            let noise = rng.random_range(-10.0..10.0);
            let mut rgb = BACKGROUND.map(|v| v + noise);
            let (cx, cy) = (j as f64 + 0.5, i as f64 + 0.5);
            for n in nuclei {
                let dist = ((cx - n.x).powi(2) + (cy - n.y).powi(2)).sqrt();
                let alpha = (n.radius + 0.5 - dist).clamp(0.0, 1.0);
                if alpha <= 0.0 {
                    continue;
                }
                let texture = rng.random_range(-12.0..12.0);
                let mut fg = [0.0; 3];
                for ch in 0..3 {
                    fg[ch] = NUCLEUS[ch] + n.tint[ch] + texture;
                }
                if let Some(cat) = n.distinct {
                    let core_r = 0.55 * n.radius;
                    let beta = (core_r + 0.5 - dist).clamp(0.0, 1.0);
                    // Later distinct categories get progressively darker cores.
                    let depth = 1.0 - 0.15 * (cat - 2) as f64;
                    for ch in 0..3 {
                        let core = CORE[ch] * depth + texture;
                        fg[ch] = beta * core + (1.0 - beta) * fg[ch];
                    }
                }
                for ch in 0..3 {
                    rgb[ch] = alpha * fg[ch] + (1.0 - alpha) * rgb[ch];
                }
            }
            let o = (i * w + j) * CHANNELS;
            for ch in 0..3 {
                px[o + ch] = rgb[ch].round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    px
}

/// Pure function of `cfg`: the slide and its annotations in window order.
pub fn generate_synthetic_slide(cfg: &GeneratorConfig, slide_id: &str) -> Result<(SlideGrid, Vec<PointAnnotation>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.rows * cfg.cols;
    let counts: Vec<usize> = (0..n).map(|_| rng.random_range(cfg.count_min..=cfg.count_max)).collect();
    let rings = ring_counts(&counts, cfg.rows, cfg.cols);
    let mut patches = Vec::with_capacity(n);
    let mut annotations = Vec::new();
    for (i, &count) in counts.iter().enumerate() {
        let (r, c) = (i / cfg.cols, i % cfg.cols);
        let nuclei = place(cfg, &mut rng, count)?;
        patches.push(render(cfg, &mut rng, &nuclei));
        let label = ambiguous_label(rings[i].0, rings[i].1, cfg.t_nb);
        annotations.extend(nuclei.iter().map(|nu| PointAnnotation {
            r,
            c,
            x: nu.x,
            y: nu.y,
            category: nu.distinct.unwrap_or(label),
        }));
    }
    let slide = SlideGrid::new(slide_id, cfg.rows, cfg.cols, cfg.patch_h, cfg.patch_w, patches)?;
    Ok((slide, annotations))
}

/// SHA-256 over pixels and the JSON form of every annotation.
pub fn content_checksum(slide: &SlideGrid, annotations: &[PointAnnotation]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in &slide.patches {
        h.update(p);
    }
    for a in annotations {
        h.update(serde_json::to_vec(a).expect("plain struct serializes"));
    }
    hex::encode(h.finalize())
}

/// Seed of slide `index` in a benchmark built from `seed`.
pub fn slide_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

/// `n` slides generated from `base` with per-slide seeds.
pub fn synthetic_benchmark(base: &GeneratorConfig, n: usize) -> Result<Vec<(SlideGrid, Vec<PointAnnotation>)>> {
    (0..n)
        .map(|i| {
            let cfg = GeneratorConfig {
                seed: slide_seed(base.seed, i),
                ..base.clone()
            };
            generate_synthetic_slide(&cfg, &format!("slide_{i:03}"))
        })
        .collect()
}
