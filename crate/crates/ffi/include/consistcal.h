#ifndef CONSISTCAL_H
#define CONSISTCAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. `CC_STATUS_OK` is zero; everything else is a failure.
typedef enum CcStatus {
  CC_STATUS_OK = 0,
  CC_STATUS_NULL_ARGUMENT = 1,
  CC_STATUS_INVALID_ARGUMENT = 2,
  CC_STATUS_IO = 3,
  CC_STATUS_PARSE = 4,
  CC_STATUS_CHECKPOINT = 5,
  CC_STATUS_DEGENERATE_ROTATION = 6,
  CC_STATUS_NUMERIC = 7,
  CC_STATUS_INTERNAL = 8,
} CcStatus;

// Opaque calibrator handle; free with [`cc_calibrator_free`].
typedef struct CcCalibrator CcCalibrator;

// Pinhole camera model.
typedef struct CcIntrinsics {
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} CcIntrinsics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or NULL if none. The pointer
// stays valid until the next failing call on the same thread.
const char *cc_last_error(void);

// Library version as a static NUL-terminated string.
const char *cc_version(void);

// Loads a checkpoint for images of `width × height`. `config_path` may be
// NULL, in which case `run.cfg` beside the checkpoint is used if present.
//
// # Safety
// String arguments must be NUL-terminated or NULL where allowed; `out` must
// be writable.
enum CcStatus cc_calibrator_load(const char *checkpoint_path,
                                 const char *config_path,
                                 uint32_t width,
                                 uint32_t height,
                                 struct CcCalibrator **out);

// Releases a calibrator. NULL is ignored.
//
// # Safety
// `cal` must come from [`cc_calibrator_load`] and not be used afterwards.
void cc_calibrator_free(struct CcCalibrator *cal);

// Intensity threshold stored in the calibrator's run configuration.
//
// # Safety
// `cal` must be a live handle; `out` must be writable.
enum CcStatus cc_calibrator_threshold(const struct CcCalibrator *cal, double *out);

// Corrects `t_init` in one forward pass. `rgb` holds `width · height · 3`
// bytes, rows top to bottom; the image size must match the one given at
// load time.
//
// # Safety
// All pointers must be valid for the documented lengths.
enum CcStatus cc_calibrator_calibrate(const struct CcCalibrator *cal,
                                      const uint8_t *rgb,
                                      const struct CcIntrinsics *intrinsics,
                                      const float *points,
                                      uintptr_t point_count,
                                      const double *t_init,
                                      double *t_pred_out);

// Projects points under extrinsic `t`. Writes `2 · count` pixel coordinates
// to `uv_out` and one 0/1 validity flag per point to `valid_out`.
//
// # Safety
// All pointers must be valid for the documented lengths.
enum CcStatus cc_project_points(const float *points,
                                uintptr_t point_count,
                                const struct CcIntrinsics *intrinsics,
                                const double *t,
                                double *uv_out,
                                uint8_t *valid_out);

// `(roll, pitch, yaw, tx, ty, tz)` in radians and meters to a 3×4 extrinsic.
//
// # Safety
// `pose` must hold 6 doubles and `out` 12.
enum CcStatus cc_euler_to_matrix(const double *pose, double *out);

// Inverse of [`cc_euler_to_matrix`]; fails with
// `CC_STATUS_DEGENERATE_ROTATION` at gimbal lock.
//
// # Safety
// `matrix` must hold 12 doubles and `pose_out` 6.
enum CcStatus cc_matrix_to_euler(const double *matrix, double *pose_out);

// Writes 1 where `intensities[i] > threshold`, else 0.
//
// # Safety
// `intensities` and `labels_out` must be valid for `count` elements.
enum CcStatus cc_binarize_intensity(const float *intensities,
                                    uintptr_t count,
                                    double threshold,
                                    uint8_t *labels_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONSISTCAL_H */
