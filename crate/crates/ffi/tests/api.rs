use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use ctxdet_ffi::*;

fn last_error() -> String {
    let p = ctxdet_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_detector() -> *mut CtxdetDetector {
    let cfg = CString::new(r#"{"patch_h": 64, "patch_w": 64, "theta_det": 0.0}"#).unwrap();
    let mut det = ptr::null_mut();
    assert_eq!(unsafe { ctxdet_detector_new(cfg.as_ptr(), 3, &mut det) }, CtxdetStatus::Ok);
    det
}

#[test]
fn streaming_and_lfov_costs_through_the_c_api() {
    let det = tiny_detector();
    let mut slide = ptr::null_mut();
    assert_eq!(unsafe { ctxdet_slide_generate(5, 3, 2, &mut slide) }, CtxdetStatus::Ok);
    let (mut rows, mut cols) = (0, 0);
    assert_eq!(unsafe { ctxdet_slide_shape(slide, &mut rows, &mut cols) }, CtxdetStatus::Ok);
    assert_eq!((rows, cols), (3, 2));

    let mut costs = Vec::new();
    for mode in [CtxdetMode::Streaming, CtxdetMode::LfovEmulated] {
        let mut dets = ptr::null_mut();
        assert_eq!(unsafe { ctxdet_infer(det, slide, mode, -1.0, &mut dets) }, CtxdetStatus::Ok);
        let n = unsafe { ctxdet_detections_len(dets) };
        assert_eq!(n, 6 * 16);
        let mut d = CtxdetDetection { row: 9, col: 9, global_x: 0.0, global_y: 0.0, score: -1.0, category: 9 };
        assert_eq!(unsafe { ctxdet_detections_get(dets, n - 1, &mut d) }, CtxdetStatus::Ok);
        assert!(d.row < 3 && d.col < 2 && (0.0..=1.0).contains(&d.score) && d.category < 3);
        assert_eq!(unsafe { ctxdet_detections_get(dets, n, &mut d) }, CtxdetStatus::Runtime);
        let mut c = CtxdetCost::default();
        assert_eq!(unsafe { ctxdet_detections_cost(dets, &mut c) }, CtxdetStatus::Ok);
        costs.push(c);
        unsafe { ctxdet_detections_free(dets) };
    }
    assert_eq!((costs[0].encoder_invocations, costs[1].encoder_invocations), (6, 12));
    assert_eq!(costs[0].max_reads_per_tile, 1);
    assert!(costs[1].tile_bytes_read + costs[1].extra_bytes > costs[0].tile_bytes_read);
    unsafe {
        ctxdet_slide_free(slide);
        ctxdet_detector_free(det);
    }
}

#[test]
fn raw_pixels_and_checkpoint_round_trip() {
    let det = tiny_detector();
    let pixels: Vec<u8> = (0..2 * 64 * 64 * 3).map(|i| (i % 251) as u8).collect();
    let mut slide = ptr::null_mut();
    let st = unsafe { ctxdet_slide_new(1, 2, 64, 64, pixels.as_ptr(), pixels.len(), &mut slide) };
    assert_eq!(st, CtxdetStatus::Ok);
    let st = unsafe { ctxdet_slide_new(1, 2, 64, 64, pixels.as_ptr(), pixels.len() - 1, &mut ptr::null_mut()) };
    assert_eq!(st, CtxdetStatus::Config);

    let tmp = tempfile::tempdir().unwrap();
    let path = CString::new(tmp.path().join("d.ctxd").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { ctxdet_detector_save(det, path.as_ptr()) }, CtxdetStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { ctxdet_detector_load(path.as_ptr(), &mut back) }, CtxdetStatus::Ok);

    let run = |d| {
        let mut out = ptr::null_mut();
        assert_eq!(unsafe { ctxdet_infer(d, slide, CtxdetMode::TwoPass, -1.0, &mut out) }, CtxdetStatus::Ok);
        let v: Vec<CtxdetDetection> = (0..unsafe { ctxdet_detections_len(out) })
            .map(|i| {
                let mut x = CtxdetDetection { row: 0, col: 0, global_x: 0.0, global_y: 0.0, score: 0.0, category: 0 };
                unsafe { ctxdet_detections_get(out, i, &mut x) };
                x
            })
            .collect();
        unsafe { ctxdet_detections_free(out) };
        v
    };
    assert_eq!(run(det), run(back));
    unsafe {
        ctxdet_detector_free(back);
        ctxdet_detector_free(det);
        ctxdet_slide_free(slide);
    }
}

#[test]
fn errors_set_codes_and_messages() {
    let mut det = ptr::null_mut();
    let bad = CString::new("{\"s\": 99}").unwrap();
    assert_eq!(unsafe { ctxdet_detector_new(bad.as_ptr(), 0, &mut det) }, CtxdetStatus::Config);
    assert!(last_error().contains("invalid configuration"), "{}", last_error());
    let junk = CString::new("not json").unwrap();
    assert_eq!(unsafe { ctxdet_detector_new(junk.as_ptr(), 0, &mut det) }, CtxdetStatus::Config);
    assert!(det.is_null());

    let missing = CString::new("/nonexistent/slide").unwrap();
    let mut slide = ptr::null_mut();
    assert_ne!(unsafe { ctxdet_slide_load(missing.as_ptr(), &mut slide) }, CtxdetStatus::Ok);
    assert!(!last_error().is_empty());

    assert_eq!(unsafe { ctxdet_detector_load(ptr::null(), &mut det) }, CtxdetStatus::NullPointer);
    assert!(last_error().contains("NULL"));
    let mut out = ptr::null_mut();
    let st = unsafe { ctxdet_infer(ptr::null(), ptr::null(), CtxdetMode::Streaming, 0.5, &mut out) };
    assert_eq!(st, CtxdetStatus::NullPointer);

    assert_eq!(unsafe { ctxdet_slide_generate(1, 0, 3, &mut slide) }, CtxdetStatus::Config);
    // A success clears the message.
    assert_eq!(unsafe { ctxdet_hungarian(ptr::null(), 0, 0, ptr::null_mut(), ptr::null_mut()) }, CtxdetStatus::Ok);
    assert!(ctxdet_last_error().is_null());
    unsafe {
        ctxdet_detector_free(ptr::null_mut());
        ctxdet_slide_free(ptr::null_mut());
        ctxdet_detections_free(ptr::null_mut());
    }
}

#[test]
fn metrics_entry_points() {
    let cost = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0];
    let mut cols = [0usize; 2];
    let mut total = 0.0;
    assert_eq!(unsafe { ctxdet_hungarian(cost.as_ptr(), 2, 3, cols.as_mut_ptr(), &mut total) }, CtxdetStatus::Ok);
    assert_eq!(cols, [1, 0]);
    assert_eq!(total, 3.0);
    let mut rows = [0usize; 3];
    let tall = [1.0, 9.0, 9.0, 1.0, 5.0, 5.0];
    assert_eq!(unsafe { ctxdet_hungarian(tall.as_ptr(), 3, 2, rows.as_mut_ptr(), &mut total) }, CtxdetStatus::Ok);
    assert_eq!(rows, [0, 1, usize::MAX]);
    let nan = [f64::NAN];
    assert_eq!(unsafe { ctxdet_hungarian(nan.as_ptr(), 1, 1, rows.as_mut_ptr(), ptr::null_mut()) }, CtxdetStatus::Runtime);

    let p = |x, y, category| CtxdetPoint { x, y, category };
    let preds = [p(0.0, 0.0, 0), p(10.0, 10.0, 1), p(50.0, 50.0, 1)];
    let gts = [p(1.0, 1.0, 0), p(12.0, 10.0, 1)];
    let mut avg = 0.0;
    let mut per = [0.0; 3];
    let st = unsafe { ctxdet_f1(preds.as_ptr(), 3, gts.as_ptr(), 2, 3, 6.0, &mut avg, per.as_mut_ptr()) };
    assert_eq!(st, CtxdetStatus::Ok);
    assert_eq!(per[0], 1.0);
    assert!((per[1] - 2.0 / 3.0).abs() < 1e-12);
    assert!(per[2].is_nan());
    assert!((avg - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    let bad = [p(0.0, 0.0, 7)];
    assert_ne!(unsafe { ctxdet_f1(bad.as_ptr(), 1, ptr::null(), 0, 3, 6.0, &mut avg, ptr::null_mut()) }, CtxdetStatus::Ok);
}

#[test]
fn header_declares_the_api_and_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/ctxdet.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "ctxdet_last_error",
        "ctxdet_detector_new",
        "ctxdet_slide_generate",
        "ctxdet_infer",
        "ctxdet_detections_free",
        "ctxdet_f1",
        "ctxdet_hungarian",
        "CTXDET_STATUS_NULL_POINTER",
        "typedef struct CtxdetDetector CtxdetDetector",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"ctxdet.h\"\nint main(void) {\n  CtxdetSlide *s = 0;\n  CtxdetStatus st = ctxdet_slide_generate(1, 2, 2, &s);\n  ctxdet_slide_free(s);\n  return st == CTXDET_STATUS_OK ? 0 : 1;\n}\n",
    )
    .unwrap();
    let Ok(out) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    else {
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(ctxdet_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
