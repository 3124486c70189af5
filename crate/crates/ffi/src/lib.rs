//! C ABI over the detector, the sliding-window engine and the metrics.
//!
//! Every fallible call returns a `CtxdetStatus`; on failure the message is
//! kept per thread and read with `ctxdet_last_error`. Handles are opaque and
//! released with their `_free` function; passing NULL to a `_free` is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ctxdet::data::{generate_synthetic_slide, load_archive, GeneratorConfig, SlideGrid};
use ctxdet::error::Error;
use ctxdet::inference::{run, CostReport, Detection, InferenceConfig, MemorySource, Mode, Models};
use ctxdet::metrics::{f1_scores, match_detections, EvalConfig, Point};
use ctxdet::model::{Detector, ModelConfig};
use ctxdet::training::hungarian;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtxdetStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Io = 3,
    Format = 4,
    Runtime = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CtxdetMode {
    Streaming = 0,
    TwoPass = 1,
    Causal = 2,
    ContextFree = 3,
    LfovEmulated = 4,
}

impl From<CtxdetMode> for Mode {
    fn from(m: CtxdetMode) -> Mode {
        match m {
            CtxdetMode::Streaming => Mode::Streaming,
            CtxdetMode::TwoPass => Mode::TwoPass,
            CtxdetMode::Causal => Mode::Causal,
            CtxdetMode::ContextFree => Mode::ContextFree,
            CtxdetMode::LfovEmulated => Mode::LfovEmulated,
        }
    }
}

/// A point in slide coordinates.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtxdetPoint {
    pub x: f64,
    pub y: f64,
    pub category: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtxdetDetection {
    pub row: usize,
    pub col: usize,
    pub global_x: f64,
    pub global_y: f64,
    pub score: f64,
    pub category: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CtxdetCost {
    pub windows: usize,
    pub encoder_invocations: u64,
    pub tile_bytes_read: u64,
    pub extra_bytes: u64,
    pub max_reads_per_tile: u32,
    pub peak_pooled: usize,
    pub peak_full: usize,
}

pub struct CtxdetDetector(Detector);

pub struct CtxdetSlide(SlideGrid);

pub struct CtxdetDetections {
    items: Vec<Detection>,
    cost: CostReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CtxdetStatus {
    match e {
        Error::Config(_) | Error::Version { .. } | Error::Missing { .. } => CtxdetStatus::Config,
        Error::Io { .. } => CtxdetStatus::Io,
        Error::Format { .. } | Error::Checksum(_) | Error::Json(_) => CtxdetStatus::Format,
        _ => CtxdetStatus::Runtime,
    }
}

struct Fail(CtxdetStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CtxdetStatus::NullPointer, format!("{what} is NULL"))
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CtxdetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CtxdetStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CtxdetStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CtxdetStatus::Config, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn ctxdet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ctxdet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// New detector from a JSON model config (NULL for defaults).
///
/// # Safety
/// `config_json` is NULL or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_detector_new(config_json: *const c_char, seed: u64, out: *mut *mut CtxdetDetector) -> CtxdetStatus {
    guard(|| {
        let cfg: ModelConfig = if config_json.is_null() {
            ModelConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config")?)
                .map_err(|e| Fail(CtxdetStatus::Config, format!("model config: {e}")))?
        };
        put(out, CtxdetDetector(Detector::new(cfg, seed)?))
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_detector_load(path: *const c_char, out: *mut *mut CtxdetDetector) -> CtxdetStatus {
    guard(|| {
        let p = PathBuf::from(str_arg(path, "path")?);
        put(out, CtxdetDetector(Detector::load(&p)?))
    })
}

/// # Safety
/// `det` comes from this library; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_detector_save(det: *const CtxdetDetector, path: *const c_char) -> CtxdetStatus {
    guard(|| {
        let d = handle(det, "detector")?;
        d.0.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `det` is NULL or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_detector_free(det: *mut CtxdetDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Slide from `rows*cols` RGB windows of `patch_h x patch_w`, stored
/// window after window in row-major grid order.
///
/// # Safety
/// `pixels` points to `len` readable bytes; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_slide_new(
    rows: usize,
    cols: usize,
    patch_h: usize,
    patch_w: usize,
    pixels: *const u8,
    len: usize,
    out: *mut *mut CtxdetSlide,
) -> CtxdetStatus {
    guard(|| {
        let data = slice_arg(pixels, len, "pixels")?;
        let per = patch_h * patch_w * 3;
        if per == 0 || len != rows * cols * per {
            return Err(Fail(
                CtxdetStatus::Config,
                format!("{len} bytes for {rows}x{cols} windows of {patch_h}x{patch_w} RGB"),
            ));
        }
        let patches = data.chunks(per).map(<[u8]>::to_vec).collect();
        put(out, CtxdetSlide(SlideGrid::new("ffi", rows, cols, patch_h, patch_w, patches)?))
    })
}

/// Slide from an archive directory.
///
/// # Safety
/// `dir` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_slide_load(dir: *const c_char, out: *mut *mut CtxdetSlide) -> CtxdetStatus {
    guard(|| {
        let (slide, _) = load_archive(&PathBuf::from(str_arg(dir, "dir")?))?;
        put(out, CtxdetSlide(slide))
    })
}

/// Seeded synthetic slide with default window size.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_slide_generate(seed: u64, rows: usize, cols: usize, out: *mut *mut CtxdetSlide) -> CtxdetStatus {
    guard(|| {
        let cfg = GeneratorConfig {
            seed,
            rows,
            cols,
            ..Default::default()
        };
        cfg.validate()?;
        put(out, CtxdetSlide(generate_synthetic_slide(&cfg, "synthetic")?.0))
    })
}

/// # Safety
/// `slide` comes from this library; `rows` and `cols` are writable.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_slide_shape(slide: *const CtxdetSlide, rows: *mut usize, cols: *mut usize) -> CtxdetStatus {
    guard(|| {
        let s = handle(slide, "slide")?;
        if rows.is_null() || cols.is_null() {
            return Err(null("shape output"));
        }
        *rows = s.0.rows;
        *cols = s.0.cols;
        Ok(())
    })
}

/// # Safety
/// `slide` is NULL or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_slide_free(slide: *mut CtxdetSlide) {
    if !slide.is_null() {
        drop(Box::from_raw(slide));
    }
}

/// One inference pass. A negative `theta_det` keeps the detector's threshold.
///
/// # Safety
/// `det` and `slide` come from this library; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_infer(
    det: *const CtxdetDetector,
    slide: *const CtxdetSlide,
    mode: CtxdetMode,
    theta_det: f32,
    out: *mut *mut CtxdetDetections,
) -> CtxdetStatus {
    guard(|| {
        let d = handle(det, "detector")?;
        let s = handle(slide, "slide")?;
        let cfg = InferenceConfig {
            mode: mode.into(),
            theta_det: (theta_det >= 0.0).then_some(theta_det),
            ..Default::default()
        };
        let (items, cost) = run(&mut MemorySource::new(&s.0), Models::detector_only(&d.0), &cfg)?;
        put(out, CtxdetDetections { items, cost })
    })
}

/// # Safety
/// `dets` is NULL or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_detections_len(dets: *const CtxdetDetections) -> usize {
    dets.as_ref().map_or(0, |d| d.items.len())
}

/// # Safety
/// `dets` comes from this library; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_detections_get(dets: *const CtxdetDetections, index: usize, out: *mut CtxdetDetection) -> CtxdetStatus {
    guard(|| {
        let d = handle(dets, "detections")?;
        let item = d.items.get(index).ok_or_else(|| {
            Fail(CtxdetStatus::Runtime, format!("detection {index} of {}", d.items.len()))
        })?;
        if out.is_null() {
            return Err(null("detection output"));
        }
        *out = CtxdetDetection {
            row: item.r,
            col: item.c,
            global_x: item.global_x,
            global_y: item.global_y,
            score: item.score,
            category: item.category,
        };
        Ok(())
    })
}

/// # Safety
/// `dets` comes from this library; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_detections_cost(dets: *const CtxdetDetections, out: *mut CtxdetCost) -> CtxdetStatus {
    guard(|| {
        let c = &handle(dets, "detections")?.cost;
        if out.is_null() {
            return Err(null("cost output"));
        }
        *out = CtxdetCost {
            windows: c.windows,
            encoder_invocations: c.encoder_invocations,
            tile_bytes_read: c.tile_bytes_read,
            extra_bytes: c.extra_bytes,
            max_reads_per_tile: c.max_reads_per_tile,
            peak_pooled: c.peak_pooled,
            peak_full: c.peak_full,
        };
        Ok(())
    })
}

/// # Safety
/// `dets` is NULL or an unfreed handle from this library.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_detections_free(dets: *mut CtxdetDetections) {
    if !dets.is_null() {
        drop(Box::from_raw(dets));
    }
}

/// Greedy sigma-matched F1. `per_category` receives `categories` values,
/// NaN for categories with no points on either side; either output may be
/// NULL.
///
/// # Safety
/// Point arrays hold `n_preds` and `n_gts` entries; outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_f1(
    preds: *const CtxdetPoint,
    n_preds: usize,
    gts: *const CtxdetPoint,
    n_gts: usize,
    categories: usize,
    sigma: f64,
    average: *mut f64,
    per_category: *mut f64,
) -> CtxdetStatus {
    guard(|| {
        let conv = |p: &[CtxdetPoint]| p.iter().map(|q| Point::new(q.x, q.y, q.category)).collect::<Vec<_>>();
        let p = conv(slice_arg(preds, n_preds, "preds")?);
        let g = conv(slice_arg(gts, n_gts, "gts")?);
        let cfg = EvalConfig {
            sigma,
            categories,
            ..Default::default()
        };
        let a = match_detections(&p, &g, &cfg)?;
        let scores = f1_scores(&a, cfg.empty);
        if !average.is_null() {
            *average = scores.average_f1;
        }
        if !per_category.is_null() {
            for (i, s) in scores.per_category.iter().enumerate() {
                *per_category.add(i) = s.f1.unwrap_or(f64::NAN);
            }
        }
        Ok(())
    })
}

/// Minimum-cost assignment of a row-major `rows x cols` matrix.
/// `assignment[i]` is the column of row `i`, or `SIZE_MAX` when unmatched.
///
/// # Safety
/// `cost` holds `rows*cols` values; `assignment` holds `rows` slots;
/// `total` is NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn ctxdet_hungarian(
    cost: *const f64,
    rows: usize,
    cols: usize,
    assignment: *mut usize,
    total: *mut f64,
) -> CtxdetStatus {
    guard(|| {
        let flat = slice_arg(cost, rows * cols, "cost")?;
        let matrix: Vec<Vec<f64>> = if cols == 0 {
            vec![Vec::new(); rows]
        } else {
            flat.chunks(cols).map(<[f64]>::to_vec).collect()
        };
        let a = hungarian(&matrix)?;
        if rows > 0 {
            if assignment.is_null() {
                return Err(null("assignment"));
            }
            let out = std::slice::from_raw_parts_mut(assignment, rows);
            out.fill(usize::MAX);
            for &(i, j) in &a.pairs {
                out[i] = j;
            }
        }
        if !total.is_null() {
            *total = a.total(&matrix);
        }
        Ok(())
    })
}
