#ifndef OMNIDISTILL_H
#define OMNIDISTILL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum OdStatus {
  OD_STATUS_OK = 0,
  OD_STATUS_NULL_POINTER = 1,
  OD_STATUS_INVALID_ARGUMENT = 2,
  OD_STATUS_CONFIG = 3,
  OD_STATUS_IO = 4,
  // Frames out of order or timestamps that do not line up.
  OD_STATUS_SEQUENCE = 5,
  // Output buffer too small; the required length was still written.
  OD_STATUS_BUFFER_TOO_SMALL = 6,
  OD_STATUS_INTERNAL = 7,
} OdStatus;

// Streaming detector: background model, student weights and post-processing.
typedef struct OdPipeline OdPipeline;

// Detection box in pixels: center, size and score in [0, 1].
typedef struct OdBox {
  double cx;
  double cy;
  double w;
  double h;
  double score;
} OdBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `cap`) and returns its full length in bytes.
//
// # Safety
// `buf` must be null or valid for `cap` bytes.
size_t od_last_error(char *buf, size_t cap);

// Creates a pipeline from a JSON run configuration, or the defaults when
// `config_json` is null.
//
// # Safety
// `config_json` must be null or a NUL-terminated string; `out` must be valid
// for one pointer write.
enum OdStatus od_pipeline_new(const char *config_json, struct OdPipeline **out);

// Releases a pipeline; null is ignored.
//
// # Safety
// `p` must come from [`od_pipeline_new`] and not be used afterwards.
void od_pipeline_free(struct OdPipeline *p);

// Replaces the detector weights with a blob from [`od_pipeline_weights`].
//
// # Safety
// `p` must be a live pipeline and `bytes` valid for `len` bytes.
enum OdStatus od_pipeline_load_weights(struct OdPipeline *p, const uint8_t *bytes, size_t len);

// Serializes the current weights into `buf`. `len` receives the blob size;
// pass a null `buf` to query it.
//
// # Safety
// `p` must be a live pipeline, `buf` null or valid for `cap` bytes, `len`
// valid for one write.
enum OdStatus od_pipeline_weights(const struct OdPipeline *p,
                                  uint8_t *buf,
                                  size_t cap,
                                  size_t *len);

// Runs one 8-bit grayscale frame (`stride` bytes per row) through the
// pipeline and writes up to `cap` boxes. `count` always receives the number
// of detections; if it exceeds `cap` the call returns
// `OD_STATUS_BUFFER_TOO_SMALL` after filling the buffer. Timestamps must
// strictly increase.
//
// # Safety
// `pixels` must be valid for `stride * height` bytes, `boxes` null or valid
// for `cap` elements, `count` valid for one write.
enum OdStatus od_pipeline_process(struct OdPipeline *p,
                                  const uint8_t *pixels,
                                  size_t width,
                                  size_t height,
                                  size_t stride,
                                  double timestamp,
                                  struct OdBox *boxes,
                                  size_t cap,
                                  size_t *count);

// Estimates a homography from `n` rows of `tx, ty, sx, sy` and writes it
// row-major into `h`. `error` (optional) receives the mean reprojection
// error in pixels.
//
// # Safety
// `pairs` must be valid for `4 * n` doubles, `h` for 9, `error` null or
// valid for one write.
enum OdStatus od_estimate_homography(const double *pairs, size_t n, double *h, double *error);

// Renders a synthetic recording into `out_dir`, as the `simulate` command does.
//
// # Safety
// `config_json` must be null or NUL-terminated; `out_dir` NUL-terminated.
enum OdStatus od_simulate(const char *config_json, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OMNIDISTILL_H */
