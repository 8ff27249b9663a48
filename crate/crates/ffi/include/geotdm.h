#ifndef GEOTDM_H
#define GEOTDM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum geotdm_status {
  GEOTDM_STATUS_OK = 0,
  GEOTDM_STATUS_NULL_POINTER = 1,
  GEOTDM_STATUS_INVALID_ARGUMENT = 2,
  GEOTDM_STATUS_DIMENSION = 3,
  GEOTDM_STATUS_NUMERICAL = 4,
  GEOTDM_STATUS_CORRUPT = 5,
  GEOTDM_STATUS_VERSION = 6,
  GEOTDM_STATUS_SHAPE_MISMATCH = 7,
  GEOTDM_STATUS_CONFIG = 8,
  GEOTDM_STATUS_IO = 9,
  GEOTDM_STATUS_BUFFER_TOO_SMALL = 10,
  GEOTDM_STATUS_PANIC = 11,
} geotdm_status;

typedef enum geotdm_system {
  GEOTDM_SYSTEM_CHARGED = 0,
  GEOTDM_SYSTEM_SPRING = 1,
  GEOTDM_SYSTEM_GRAVITY = 2,
} geotdm_system;

/**
 * A trained model and its noise schedule.
 */
typedef struct geotdm_model geotdm_model;

/**
 * An ordered collection of trajectories.
 */
typedef struct geotdm_trajectories geotdm_trajectories;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *geotdm_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *geotdm_version(void);

/**
 * Loads a checkpoint into a new model handle.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum geotdm_status geotdm_model_load(const char *path, struct geotdm_model **out);

/**
 * # Safety
 * `model` must come from [`geotdm_model_load`] and not be freed twice; null is ignored.
 */
void geotdm_model_free(struct geotdm_model *model);

/**
 * Target frames, condition frames and spatial dimension of the model.
 *
 * # Safety
 * `model` must be a live handle; the out pointers must be valid.
 */
enum geotdm_status geotdm_model_shape(const struct geotdm_model *model,
                                      uintptr_t *frames,
                                      uintptr_t *cond_frames,
                                      uintptr_t *dim);

/**
 * Draws `n_samples` unconditional trajectories on a complete graph into `out`
 * (`n_samples × frames × nodes × dim` values).
 *
 * # Safety
 * `model` must be a live handle, `features` must hold `nodes × feature_dim`
 * values and `out` `out_len` writable values.
 */
enum geotdm_status geotdm_sample_uncond(const struct geotdm_model *model,
                                        const float *features,
                                        uintptr_t nodes,
                                        uintptr_t feature_dim,
                                        uintptr_t n_samples,
                                        uint64_t seed,
                                        float *out,
                                        uintptr_t out_len);

/**
 * Forecasts `n_samples` continuations of `cond` (`cond_frames × nodes × dim`
 * values, the frames right before the forecast) into `out`.
 *
 * # Safety
 * As for [`geotdm_sample_uncond`]; `cond` must hold `cond_frames × nodes × dim` values.
 */
enum geotdm_status geotdm_forecast(const struct geotdm_model *model,
                                   const float *cond,
                                   uintptr_t cond_frames,
                                   const float *features,
                                   uintptr_t nodes,
                                   uintptr_t feature_dim,
                                   uintptr_t n_samples,
                                   uint64_t seed,
                                   float *out,
                                   uintptr_t out_len);

/**
 * Simulates one trajectory of a default system with `n_bodies` bodies in 3D.
 * Writes `frames × n_bodies × 3` positions into `out`.
 *
 * # Safety
 * `out` must hold `out_len` writable values.
 */
enum geotdm_status geotdm_simulate(enum geotdm_system system,
                                   uintptr_t n_bodies,
                                   uintptr_t frames,
                                   uint64_t seed,
                                   float *out,
                                   uintptr_t out_len);

/**
 * ADE and FDE between two `frames × nodes × dim` buffers.
 *
 * # Safety
 * `x` and `y` must hold `frames × nodes × dim` values; `ade` and `fde` must be valid.
 */
enum geotdm_status geotdm_ade_fde(const float *x,
                                  const float *y,
                                  uintptr_t frames,
                                  uintptr_t nodes,
                                  uintptr_t dim,
                                  double *ade,
                                  double *fde);

/**
 * Reads every record of a GTRJ file.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum geotdm_status geotdm_gtrj_read(const char *path, struct geotdm_trajectories **out);

/**
 * Writes the collection to a GTRJ file.
 *
 * # Safety
 * `trajs` must be a live handle and `path` a nul-terminated string.
 */
enum geotdm_status geotdm_gtrj_write(const struct geotdm_trajectories *trajs, const char *path);

/**
 * Number of trajectories; 0 for a null handle.
 *
 * # Safety
 * `trajs` must be a live handle or null.
 */
uintptr_t geotdm_trajectories_len(const struct geotdm_trajectories *trajs);

/**
 * Frames, nodes and dimension of trajectory `index`.
 *
 * # Safety
 * `trajs` must be a live handle; the out pointers must be valid.
 */
enum geotdm_status geotdm_trajectory_shape(const struct geotdm_trajectories *trajs,
                                           uintptr_t index,
                                           uintptr_t *frames,
                                           uintptr_t *nodes,
                                           uintptr_t *dim);

/**
 * Copies the coordinates of trajectory `index` into `out`.
 *
 * # Safety
 * `trajs` must be a live handle and `out` hold `out_len` writable values.
 */
enum geotdm_status geotdm_trajectory_coords(const struct geotdm_trajectories *trajs,
                                            uintptr_t index,
                                            float *out,
                                            uintptr_t out_len);

/**
 * # Safety
 * `trajs` must come from [`geotdm_gtrj_read`] and not be freed twice; null is ignored.
 */
void geotdm_trajectories_free(struct geotdm_trajectories *trajs);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GEOTDM_H */
