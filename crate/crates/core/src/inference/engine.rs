use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::auxseg::{morph_embed, AuxSeg};
use crate::data::SlideGrid;
use crate::error::{Error, Result};
use crate::model::detector::{argmax, ContextBlock};
use crate::model::{join_features, Detector, PhiPrime};
use crate::numerics::Tensor;

use super::cache::{ContextCache, FullEntry};
use super::schedule::{plan_causal_schedule, plan_schedule, Event};
use super::source::{MemorySource, TileSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Streaming,
    TwoPass,
    /// Streaming with past-only context.
    Causal,
    /// Center-only context.
    ContextFree,
    /// Context-free detection plus the encode and read cost of a
    /// large-field-of-view input per window.
    LfovEmulated,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Streaming, Mode::TwoPass, Mode::Causal, Mode::ContextFree, Mode::LfovEmulated];
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "streaming" => Mode::Streaming,
            "two_pass" => Mode::TwoPass,
            "causal" => Mode::Causal,
            "context_free" => Mode::ContextFree,
            "lfov_emulated" => Mode::LfovEmulated,
            _ => {
                return Err(Error::Config(format!(
                    "unknown inference mode {s:?} (streaming, two_pass, causal, context_free, lfov_emulated)"
                )))
            }
        })
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Streaming => "streaming",
            Mode::TwoPass => "two_pass",
            Mode::Causal => "causal",
            Mode::ContextFree => "context_free",
            Mode::LfovEmulated => "lfov_emulated",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub mode: Mode,
    /// Foreground threshold; `None` uses the detector's.
    pub theta_det: Option<f32>,
    /// Morphology embedding from the auxiliary model; zeros when off.
    pub use_me: bool,
    /// Bytes read per unit of window area by the emulated large-field input.
    pub lfov_factor: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            mode: Mode::Streaming,
            theta_det: None,
            use_me: true,
            lfov_factor: 1.0,
        }
    }
}

#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub detector: &'a Detector,
    pub aux: Option<&'a AuxSeg>,
    pub head: Option<&'a PhiPrime>,
}

impl<'a> Models<'a> {
    pub fn detector_only(detector: &'a Detector) -> Self {
        Models {
            detector,
            aux: None,
            head: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub slide_id: String,
    pub r: usize,
    pub c: usize,
    pub global_x: f64,
    pub global_y: f64,
    pub local_x: f64,
    pub local_y: f64,
    pub score: f64,
    /// Final category: φ′ when a refinement head is loaded, φ otherwise.
    pub category: usize,
    pub phi_category: usize,
    pub proposal: usize,
    #[serde(skip)]
    pub embedding: Vec<f32>,
    #[serde(skip)]
    pub morph: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub mode: String,
    pub slide_id: String,
    pub windows: usize,
    pub encoder_invocations: u64,
    pub aux_invocations: u64,
    pub tile_bytes_read: u64,
    /// Simulated reads charged by baseline modes.
    pub extra_bytes: u64,
    pub max_reads_per_tile: u32,
    pub peak_pooled: usize,
    pub peak_full: usize,
    pub peak_cache_bytes: usize,
    pub detections: usize,
    pub wall_ms: f64,
}

impl CostReport {
    pub fn total_bytes(&self) -> u64 {
        self.tile_bytes_read + self.extra_bytes
    }
}

struct Ctx<'a> {
    models: Models<'a>,
    theta: f32,
    use_me: bool,
    slide_id: String,
    patch_h: usize,
    patch_w: usize,
}

/// Detections of one window from its cached features and context.
fn detect_one(cx: &Ctx, r: usize, c: usize, full: &FullEntry, ctx: &ContextBlock) -> Result<(Vec<Detection>, bool)> {
    let det = cx.models.detector;
    let props = det.detect_window(&full.features, ctx)?;
    let kept: Vec<_> = props.into_iter().filter(|p| p.foreground() >= cx.theta).collect();
    let refine = cx.models.head;
    let run_aux = refine.is_some() && cx.use_me && cx.models.aux.is_some();
    let morph_map = if run_aux {
        Some(cx.models.aux.expect("checked above").predict(&full.pixels)?.1)
    } else {
        None
    };
    let mut out = Vec::with_capacity(kept.len());
    let mut rows = Vec::with_capacity(kept.len());
    for p in &kept {
        let (x, y) = p.point();
        let (x, y) = (x as f64, y as f64);
        let m = match (&morph_map, refine) {
            (Some(mf), _) => {
                let cx_ = x.clamp(0.0, cx.patch_w as f64 - 1e-3);
                let cy_ = y.clamp(0.0, cx.patch_h as f64 - 1e-3);
                morph_embed(mf, cx.patch_h, cx.patch_w, cx_, cy_)?
            }
            (None, Some(h)) => vec![0.0; h.d_m],
            (None, None) => Vec::new(),
        };
        if refine.is_some() {
            rows.push(join_features(&p.embedding, &m));
        }
        out.push(Detection {
            slide_id: cx.slide_id.clone(),
            r,
            c,
            global_x: (c * cx.patch_w) as f64 + x,
            global_y: (r * cx.patch_h) as f64 + y,
            local_x: x,
            local_y: y,
            score: p.foreground() as f64,
            category: p.category(),
            phi_category: p.category(),
            proposal: p.index,
            embedding: p.embedding.clone(),
            morph: m,
        });
    }
    if let Some(h) = refine {
        for (d, l) in out.iter_mut().zip(h.logits(&rows)?) {
            d.category = argmax(&l);
        }
    }
    Ok((out, run_aux))
}

/// Context of `delta` blocks holding only the center entry.
fn center_context(pooled: &Tensor<f32>, delta: usize) -> Result<ContextBlock> {
    let n = (2 * delta + 1).pow(2);
    let per = pooled.numel();
    let mut data = vec![0.0; n * per];
    data[(n / 2) * per..(n / 2 + 1) * per].copy_from_slice(pooled.data());
    let mut shape = vec![n];
    shape.extend_from_slice(pooled.shape());
    Ok(ContextBlock {
        tokens: Tensor::new(shape, data)?,
        presence: (0..n).map(|i| i == n / 2).collect(),
    })
}

fn check_geometry(src: &dyn TileSource, det: &Detector) -> Result<()> {
    if (src.patch_h(), src.patch_w()) != (det.cfg.patch_h, det.cfg.patch_w) {
        return Err(Error::Config(format!(
            "slide windows are {}x{}, detector expects {}x{}",
            src.patch_h(),
            src.patch_w(),
            det.cfg.patch_h,
            det.cfg.patch_w
        )));
    }
    Ok(())
}

/// Runs one inference pass over a tile source in the configured mode.
pub fn run(src: &mut dyn TileSource, models: Models, cfg: &InferenceConfig) -> Result<(Vec<Detection>, CostReport)> {
    let det = models.detector;
    check_geometry(src, det)?;
    let start = Instant::now();
    let (rows, cols) = (src.rows(), src.cols());
    let delta = det.cfg.delta;
    let cx = Ctx {
        models,
        theta: cfg.theta_det.unwrap_or(det.cfg.theta_det),
        use_me: cfg.use_me,
        slide_id: src.slide_id().to_string(),
        patch_h: src.patch_h(),
        patch_w: src.patch_w(),
    };
    let mut report = CostReport {
        mode: cfg.mode.to_string(),
        slide_id: cx.slide_id.clone(),
        windows: rows * cols,
        ..Default::default()
    };
    let mut detections = Vec::new();
    let mut cache = ContextCache::new();
    let (sched_delta, center_only) = match cfg.mode {
        Mode::ContextFree | Mode::LfovEmulated => (0, true),
        _ => (delta, false),
    };
    let events = match cfg.mode {
        Mode::TwoPass => {
            let mut ev: Vec<Event> = (0..rows * cols).map(|i| Event::Encode(i / cols, i % cols)).collect();
            ev.extend((0..rows * cols).map(|i| Event::Detect(i / cols, i % cols)));
            ev.extend((0..rows).map(Event::EvictFullRow));
            ev.extend((0..rows).map(Event::EvictPooledRow));
            ev
        }
        Mode::Causal => plan_causal_schedule(rows, cols, delta)?.events,
        _ => plan_schedule(rows, cols, sched_delta)?.events,
    };
    let causal = cfg.mode == Mode::Causal;
    let lfov_extra = ((2 * delta + 1).pow(2) as f64 * (cx.patch_h * cx.patch_w * 3) as f64 * cfg.lfov_factor).round() as u64;

    let mut i = 0;
    while i < events.len() {
        match events[i] {
            Event::Encode(..) => {
                let mut batch = Vec::new();
                while let Some(&Event::Encode(r, c)) = events.get(i) {
                    batch.push((r, c, src.read(r, c)?));
                    i += 1;
                }
                let feats: Vec<Tensor<f32>> = batch
                    .par_iter()
                    .map(|(_, _, px)| det.encode_windows(&[px]).map(|mut v| v.remove(0)))
                    .collect::<Result<_>>()?;
                report.encoder_invocations += batch.len() as u64;
                for ((r, c, px), f) in batch.into_iter().zip(feats) {
                    let pooled = det.pool_features(&f);
                    cache.insert(r, c, pooled, FullEntry { features: f, pixels: px })?;
                }
            }
            Event::Detect(..) => {
                let mut jobs = Vec::new();
                while let Some(&Event::Detect(r, c)) = events.get(i) {
                    let ctx = if center_only {
                        let b = cache.context(r, c, 0, rows, cols, false)?;
                        let pooled = Tensor::new(b.tokens.shape()[1..].to_vec(), b.tokens.data().to_vec())?;
                        center_context(&pooled, delta)?
                    } else {
                        cache.context(r, c, delta, rows, cols, causal)?
                    };
                    jobs.push((r, c, ctx));
                    i += 1;
                }
                let results: Vec<(Vec<Detection>, bool)> = jobs
                    .par_iter()
                    .map(|(r, c, ctx)| {
                        let full = cache.full(*r, *c)?;
                        if cfg.mode == Mode::LfovEmulated {
                            // The large-field input would be encoded too.
                            det.encode_windows(&[&full.pixels])?;
                        }
                        detect_one(&cx, *r, *c, full, ctx)
                    })
                    .collect::<Result<_>>()?;
                for (d, aux_ran) in results {
                    report.aux_invocations += aux_ran as u64;
                    detections.extend(d);
                }
                if cfg.mode == Mode::LfovEmulated {
                    report.encoder_invocations += jobs.len() as u64;
                    report.extra_bytes += lfov_extra * jobs.len() as u64;
                }
            }
            Event::EvictFullRow(r) => {
                cache.evict_full_row(r);
                i += 1;
            }
            Event::EvictPooledRow(r) => {
                cache.evict_pooled_row(r);
                i += 1;
            }
        }
    }
    if cache.pooled_len() != 0 || cache.full_len() != 0 {
        return Err(Error::CacheInvariant("entries left in the cache after the pass".into()));
    }
    report.tile_bytes_read = src.bytes_read();
    report.max_reads_per_tile = src.reads().iter().copied().max().unwrap_or(0);
    report.peak_pooled = cache.peak_pooled;
    report.peak_full = cache.peak_full;
    report.peak_cache_bytes = cache.peak_bytes;
    report.detections = detections.len();
    report.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    if matches!(cfg.mode, Mode::Streaming | Mode::Causal) {
        let (pb, fb) = ((2 * delta + 1) * cols, (delta + 1) * cols);
        if report.peak_pooled > pb || report.peak_full > fb {
            return Err(Error::CacheInvariant(format!(
                "peak residency pooled {} (bound {pb}), full {} (bound {fb})",
                report.peak_pooled, report.peak_full
            )));
        }
    }
    Ok((detections, report))
}

pub fn run_streaming(slide: &SlideGrid, models: Models, cfg: &InferenceConfig) -> Result<(Vec<Detection>, CostReport)> {
    let cfg = InferenceConfig {
        mode: Mode::Streaming,
        ..cfg.clone()
    };
    run(&mut MemorySource::new(slide), models, &cfg)
}

pub fn run_two_pass(slide: &SlideGrid, models: Models, cfg: &InferenceConfig) -> Result<(Vec<Detection>, CostReport)> {
    let cfg = InferenceConfig {
        mode: Mode::TwoPass,
        ..cfg.clone()
    };
    run(&mut MemorySource::new(slide), models, &cfg)
}

pub fn bench(slide: &SlideGrid, models: Models, cfg: &InferenceConfig, mode: Mode) -> Result<CostReport> {
    let cfg = InferenceConfig { mode, ..cfg.clone() };
    Ok(run(&mut MemorySource::new(slide), models, &cfg)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            patch_h: 16,
            patch_w: 16,
            stages: 3,
            s: 2,
            theta_det: 0.0,
            ..Default::default()
        }
    }

    fn slide(rows: usize, cols: usize) -> SlideGrid {
        let patches = (0..rows * cols)
            .map(|i| (0..16 * 16 * 3).map(|j| ((i * 53 + j * 11) % 253) as u8).collect())
            .collect();
        SlideGrid::new("t", rows, cols, 16, 16, patches).unwrap()
    }

    #[test]
    fn streaming_matches_two_pass() {
        let det = Detector::new(tiny(), 4).unwrap();
        let g = slide(4, 3);
        let cfg = InferenceConfig::default();
        let (a, ra) = run_streaming(&g, Models::detector_only(&det), &cfg).unwrap();
        let (b, rb) = run_two_pass(&g, Models::detector_only(&det), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.encoder_invocations, 12);
        assert_eq!(rb.encoder_invocations, 12);
        assert_eq!(rb.peak_pooled, 12);
        assert!(ra.peak_pooled <= 9 && ra.peak_full <= 6);
        assert_eq!(ra.max_reads_per_tile, 1);
    }

    #[test]
    fn single_window_equals_zero_context_detection() {
        let det = Detector::new(tiny(), 4).unwrap();
        let g = slide(1, 1);
        let (a, _) = run_streaming(&g, Models::detector_only(&det), &InferenceConfig::default()).unwrap();
        let f = det.encode_windows(&[g.patch(0, 0)]).unwrap().remove(0);
        let ctx = center_context(&det.pool_features(&f), 1).unwrap();
        let props = det.detect_window(&f, &ctx).unwrap();
        assert_eq!(a.len(), props.len());
        for (d, p) in a.iter().zip(&props) {
            assert_eq!(d.local_x, p.point().0 as f64);
            assert_eq!(d.category, p.category());
        }
    }

    #[test]
    fn lfov_costs_more() {
        let det = Detector::new(tiny(), 4).unwrap();
        let g = slide(2, 3);
        let cfg = InferenceConfig::default();
        let s = bench(&g, Models::detector_only(&det), &cfg, Mode::Streaming).unwrap();
        let l = bench(&g, Models::detector_only(&det), &cfg, Mode::LfovEmulated).unwrap();
        assert_eq!(s.encoder_invocations, 6);
        assert_eq!(l.encoder_invocations, 12);
        assert_eq!(s.tile_bytes_read, 6 * 16 * 16 * 3);
        assert_eq!(l.total_bytes(), s.total_bytes() * 10);
    }

    #[test]
    fn modes_parse_and_print() {
        for m in Mode::ALL {
            assert_eq!(m.to_string().parse::<Mode>().unwrap(), m);
        }
        assert!("nope".parse::<Mode>().is_err());
    }
}
