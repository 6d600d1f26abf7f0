#ifndef T2LDM_H
#define T2LDM_H

/* Generated from the Rust sources by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum {
  T2LDM_STATUS_OK = 0,
  T2LDM_STATUS_INVALID_ARGUMENT = 1,
  T2LDM_STATUS_REJECTED_INPUT = 2,
  T2LDM_STATUS_SHAPE_MISMATCH = 3,
  T2LDM_STATUS_NON_FINITE_LOSS = 4,
  T2LDM_STATUS_FORMAT = 5,
  T2LDM_STATUS_IO = 6,
  T2LDM_STATUS_NULL_POINTER = 7,
  // The output buffer is too small; the message names the needed length.
  T2LDM_STATUS_BUFFER_TOO_SMALL = 8,
  T2LDM_STATUS_PANIC = 9,
} T2ldmStatus;

// A point cloud: `x, y, z, intensity` per point.
typedef struct T2ldmCloud T2ldmCloud;

// A trained denoiser with its sensor and noise schedule.
typedef struct T2ldmModel T2ldmModel;

// Sensor geometry used for projection.
typedef struct T2ldmSensor T2ldmSensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static nul-terminated string.
const char *t2ldm_version(void);

// Message of the last failed call on this thread, or null. Valid until
// the next call into the library on the same thread.
const char *t2ldm_last_error(void);

// # Safety
// `s` must be null or a string returned by this library.
void t2ldm_string_free(char *s);

// # Safety
// `out` must be valid for writing one pointer.
T2ldmStatus t2ldm_sensor_new(uintptr_t height,
                             uintptr_t width,
                             double fov_up,
                             double fov_down,
                             double depth_min,
                             double depth_max,
                             T2ldmSensor **out);

// # Safety
// `sensor` must be null or a handle from [`t2ldm_sensor_new`].
void t2ldm_sensor_free(T2ldmSensor *sensor);

// Builds a cloud from `n` interleaved `x, y, z, intensity` quadruples.
//
// # Safety
// `xyzi` must hold `4 * n` values; `out` must be valid for writing.
T2ldmStatus t2ldm_cloud_new(const double *xyzi, uintptr_t n, T2ldmCloud **out);

// Reads a cloud from the library's binary point format.
//
// # Safety
// `path` must be a nul-terminated string; `out` must be valid for writing.
T2ldmStatus t2ldm_cloud_read(const char *path, T2ldmCloud **out);

// # Safety
// `cloud` must be a live handle; `path` a nul-terminated string.
T2ldmStatus t2ldm_cloud_write(const T2ldmCloud *cloud, const char *path);

// Number of points, or 0 for a null handle.
//
// # Safety
// `cloud` must be null or a live handle.
uintptr_t t2ldm_cloud_len(const T2ldmCloud *cloud);

// Copies the points as `x, y, z, intensity` quadruples into `out`, which
// holds `cap` values.
//
// # Safety
// `cloud` must be a live handle; `out` must hold `cap` values.
T2ldmStatus t2ldm_cloud_points(const T2ldmCloud *cloud, double *out, uintptr_t cap);

// # Safety
// `cloud` must be null or a handle from this library.
void t2ldm_cloud_free(T2ldmCloud *cloud);

// Projects a cloud and maps it into `[-1, 1]`: depth plane then
// intensity plane, `2 × H × W` values row-major.
//
// # Safety
// Handles must be live; `out` must hold `cap` values.
T2ldmStatus t2ldm_project(const T2ldmCloud *cloud,
                          const T2ldmSensor *sensor,
                          double *out,
                          uintptr_t cap);

// Inverse of [`t2ldm_project`]: pixels whose depth falls below the
// sensor minimum are dropped.
//
// # Safety
// `values` must hold `len` values; `sensor` must be live; `out` writable.
T2ldmStatus t2ldm_unproject(const double *values,
                            uintptr_t len,
                            const T2ldmSensor *sensor,
                            T2ldmCloud **out);

// Captions one scene. `scene_json` holds `{"boxes": [...], "weather",
// "time"}`; `template` is e.g. `"weather,quantity"`. The result is the
// annotation record as JSON.
//
// # Safety
// Strings must be nul-terminated; `out` must be valid for writing.
T2ldmStatus t2ldm_annotate(const char *scene_json, const char *template_, char **out);

// Counts the object clusters the detector finds in a cloud, and how
// many of them are car-sized.
//
// # Safety
// `cloud` must be live; `clusters` and `cars` must be valid for writing.
T2ldmStatus t2ldm_detect(const T2ldmCloud *cloud, uintptr_t *clusters, uintptr_t *cars);

// Chamfer, nearest-point MSE and matched (earth mover's) distance between
// two clouds, on coordinates as given.
//
// # Safety
// Handles must be live; the outputs must be valid for writing.
T2ldmStatus t2ldm_point_distances(const T2ldmCloud *pred,
                                  const T2ldmCloud *gt,
                                  double *cd,
                                  double *mse,
                                  double *emd);

// Evaluates generated against reference clouds with default settings
// and returns the report as JSON. `prompts` may be null; otherwise it
// holds one string per generated cloud.
//
// # Safety
// Arrays must hold the stated number of live handles or strings.
T2ldmStatus t2ldm_evaluate(const T2ldmCloud *const *generated,
                           uintptr_t n_generated,
                           const T2ldmCloud *const *reference,
                           uintptr_t n_reference,
                           const char *const *prompts,
                           char **out);

// Loads a denoiser checkpoint written by `t2ldm train`. `weights` selects
// `"ema"` or `"params"`.
//
// # Safety
// Strings must be nul-terminated; `out` must be valid for writing.
T2ldmStatus t2ldm_model_load(const char *path, const char *weights, T2ldmModel **out);

// Samples one cloud for `prompt` (empty for unconditional).
//
// # Safety
// `model` must be live; `prompt` nul-terminated; `out` writable.
T2ldmStatus t2ldm_model_sample(const T2ldmModel *model,
                               const char *prompt,
                               double cfg_scale,
                               uint64_t seed,
                               T2ldmCloud **out);

// # Safety
// `model` must be null or a handle from [`t2ldm_model_load`].
void t2ldm_model_free(T2ldmModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* T2LDM_H */
