#ifndef CTXDET_H
#define CTXDET_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum CtxdetStatus {
  CTXDET_STATUS_OK = 0,
  CTXDET_STATUS_NULL_POINTER = 1,
  CTXDET_STATUS_CONFIG = 2,
  CTXDET_STATUS_IO = 3,
  CTXDET_STATUS_FORMAT = 4,
  CTXDET_STATUS_RUNTIME = 5,
  CTXDET_STATUS_PANIC = 6,
} CtxdetStatus;

typedef enum CtxdetMode {
  CTXDET_MODE_STREAMING = 0,
  CTXDET_MODE_TWO_PASS = 1,
  CTXDET_MODE_CAUSAL = 2,
  CTXDET_MODE_CONTEXT_FREE = 3,
  CTXDET_MODE_LFOV_EMULATED = 4,
} CtxdetMode;

typedef struct CtxdetDetections CtxdetDetections;

typedef struct CtxdetDetector CtxdetDetector;

typedef struct CtxdetSlide CtxdetSlide;

typedef struct CtxdetDetection {
  uintptr_t row;
  uintptr_t col;
  double global_x;
  double global_y;
  double score;
  uintptr_t category;
} CtxdetDetection;

typedef struct CtxdetCost {
  uintptr_t windows;
  uint64_t encoder_invocations;
  uint64_t tile_bytes_read;
  uint64_t extra_bytes;
  uint32_t max_reads_per_tile;
  uintptr_t peak_pooled;
  uintptr_t peak_full;
} CtxdetCost;

/**
 * A point in slide coordinates.
 */
typedef struct CtxdetPoint {
  double x;
  double y;
  uintptr_t category;
} CtxdetPoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call on the same thread.
 */
const char *ctxdet_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ctxdet_version(void);

/**
 * New detector from a JSON model config (NULL for defaults).
 *
 * # Safety
 * `config_json` is NULL or a NUL-terminated string; `out` is writable.
 */
enum CtxdetStatus ctxdet_detector_new(const char *config_json,
                                      uint64_t seed,
                                      struct CtxdetDetector **out);

/**
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum CtxdetStatus ctxdet_detector_load(const char *path, struct CtxdetDetector **out);

/**
 * # Safety
 * `det` comes from this library; `path` is a NUL-terminated string.
 */
enum CtxdetStatus ctxdet_detector_save(const struct CtxdetDetector *det, const char *path);

/**
 * # Safety
 * `det` is NULL or an unfreed handle from this library.
 */
void ctxdet_detector_free(struct CtxdetDetector *det);

/**
 * Slide from `rows*cols` RGB windows of `patch_h x patch_w`, stored
 * window after window in row-major grid order.
 *
 * # Safety
 * `pixels` points to `len` readable bytes; `out` is writable.
 */
enum CtxdetStatus ctxdet_slide_new(uintptr_t rows,
                                   uintptr_t cols,
                                   uintptr_t patch_h,
                                   uintptr_t patch_w,
                                   const uint8_t *pixels,
                                   uintptr_t len,
                                   struct CtxdetSlide **out);

/**
 * Slide from an archive directory.
 *
 * # Safety
 * `dir` is a NUL-terminated string; `out` is writable.
 */
enum CtxdetStatus ctxdet_slide_load(const char *dir, struct CtxdetSlide **out);

/**
 * Seeded synthetic slide with default window size.
 *
 * # Safety
 * `out` is writable.
 */
enum CtxdetStatus ctxdet_slide_generate(uint64_t seed,
                                        uintptr_t rows,
                                        uintptr_t cols,
                                        struct CtxdetSlide **out);

/**
 * # Safety
 * `slide` comes from this library; `rows` and `cols` are writable.
 */
enum CtxdetStatus ctxdet_slide_shape(const struct CtxdetSlide *slide,
                                     uintptr_t *rows,
                                     uintptr_t *cols);

/**
 * # Safety
 * `slide` is NULL or an unfreed handle from this library.
 */
void ctxdet_slide_free(struct CtxdetSlide *slide);

/**
 * One inference pass. A negative `theta_det` keeps the detector's threshold.
 *
 * # Safety
 * `det` and `slide` come from this library; `out` is writable.
 */
enum CtxdetStatus ctxdet_infer(const struct CtxdetDetector *det,
                               const struct CtxdetSlide *slide,
                               enum CtxdetMode mode,
                               float theta_det,
                               struct CtxdetDetections **out);

/**
 * # Safety
 * `dets` is NULL or a handle from this library.
 */
uintptr_t ctxdet_detections_len(const struct CtxdetDetections *dets);

/**
 * # Safety
 * `dets` comes from this library; `out` is writable.
 */
enum CtxdetStatus ctxdet_detections_get(const struct CtxdetDetections *dets,
                                        uintptr_t index,
                                        struct CtxdetDetection *out);

/**
 * # Safety
 * `dets` comes from this library; `out` is writable.
 */
enum CtxdetStatus ctxdet_detections_cost(const struct CtxdetDetections *dets,
                                         struct CtxdetCost *out);

/**
 * # Safety
 * `dets` is NULL or an unfreed handle from this library.
 */
void ctxdet_detections_free(struct CtxdetDetections *dets);

/**
 * Greedy sigma-matched F1. `per_category` receives `categories` values,
 * NaN for categories with no points on either side; either output may be
 * NULL.
 *
 * # Safety
 * Point arrays hold `n_preds` and `n_gts` entries; outputs are writable.
 */
enum CtxdetStatus ctxdet_f1(const struct CtxdetPoint *preds,
                            uintptr_t n_preds,
                            const struct CtxdetPoint *gts,
                            uintptr_t n_gts,
                            uintptr_t categories,
                            double sigma,
                            double *average,
                            double *per_category);

/**
 * Minimum-cost assignment of a row-major `rows x cols` matrix.
 * `assignment[i]` is the column of row `i`, or `SIZE_MAX` when unmatched.
 *
 * # Safety
 * `cost` holds `rows*cols` values; `assignment` holds `rows` slots;
 * `total` is NULL or writable.
 */
enum CtxdetStatus ctxdet_hungarian(const double *cost,
                                   uintptr_t rows,
                                   uintptr_t cols,
                                   uintptr_t *assignment,
                                   double *total);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CTXDET_H */
