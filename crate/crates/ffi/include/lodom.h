#ifndef LODOM_H
#define LODOM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Skip the temporal state between pairs.
 */
#define LODOM_NO_TEMPORAL 1

/**
 * Start every pair from the identity.
 */
#define LODOM_NO_SEQ_INIT 2

/**
 * Rebuild every pyramid instead of reusing it.
 */
#define LODOM_NO_CACHE 4

typedef enum LodomStatus {
  LODOM_STATUS_OK = 0,
  LODOM_STATUS_NULL_POINTER = 1,
  LODOM_STATUS_INVALID_ARGUMENT = 2,
  LODOM_STATUS_IO = 3,
  LODOM_STATUS_DATA = 4,
  LODOM_STATUS_NUMERIC = 5,
  LODOM_STATUS_PANIC = 6,
} LodomStatus;

/**
 * Opaque model handle.
 */
typedef struct LodomModel LodomModel;

/**
 * Trajectory metrics. `rte` and `rre` are NaN and `kitti_valid` is 0 when
 * the ground-truth path is shorter than the shortest segment.
 */
typedef struct LodomMetrics {
  double rte;
  double rre;
  double ate;
  double rpe_t;
  double rpe_r;
  int32_t kitti_valid;
} LodomMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `cap`) and returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t lodom_last_error_message(char *buf, size_t cap);

/**
 * Creates a freshly initialized desk-profile model.
 *
 * # Safety
 * `out` must be null or valid for one pointer write.
 */
enum LodomStatus lodom_model_new_desk(uint64_t seed, struct LodomModel **out);

/**
 * Loads a model from a checkpoint file.
 *
 * # Safety
 * `path` must be null or a NUL-terminated string; `out` must be null or
 * valid for one pointer write.
 */
enum LodomStatus lodom_model_load(const char *path, struct LodomModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void lodom_model_free(struct LodomModel *model);

/**
 * Number of points every frame is resampled to.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t lodom_model_points(const struct LodomModel *model);

/**
 * Estimates world poses for a sequence. Frame `k` has `counts[k]` points,
 * stored consecutively as xyz triples in `points`. `out_poses` receives
 * `12 · frames` doubles. `flags` combines the `LODOM_NO_*` switches.
 *
 * # Safety
 * `points` must hold `3 · Σ counts` floats, `counts` `frames` entries and
 * `out_poses` room for `12 · frames` doubles.
 */
enum LodomStatus lodom_run_sequence(const struct LodomModel *model,
                                    const float *points,
                                    const size_t *counts,
                                    size_t frames,
                                    uint32_t flags,
                                    double *out_poses);

/**
 * Metrics of `est` against `gt`, both `frames` world poses.
 *
 * # Safety
 * `gt` and `est` must hold `12 · frames` doubles; `out` must be valid for
 * one write.
 */
enum LodomStatus lodom_eval(const double *gt,
                            const double *est,
                            size_t frames,
                            struct LodomMetrics *out);

/**
 * Transform carrying frame-`a` coordinates into frame `b`, from the world
 * poses of both frames.
 *
 * # Safety
 * `world_a` and `world_b` must hold 12 doubles; `out` room for 12.
 */
enum LodomStatus lodom_relative_pose(const double *world_a, const double *world_b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LODOM_H */
