#ifndef BODYLIFT_H
#define BODYLIFT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum BlStatus {
  BL_STATUS_OK = 0,
  BL_STATUS_NULL_POINTER = 1,
  BL_STATUS_INVALID_ARGUMENT = 2,
  BL_STATUS_IO = 3,
  BL_STATUS_PARSE = 4,
  /**
   * Sizes or dimensions do not agree with the model or lifter.
   */
  BL_STATUS_MISMATCH = 5,
  BL_STATUS_DIVERGED = 6,
  /**
   * A caller buffer is smaller than required.
   */
  BL_STATUS_BUFFER_TOO_SMALL = 7,
  /**
   * Fitting needs more observed keypoints.
   */
  BL_STATUS_INSUFFICIENT_OBSERVATIONS = 8,
  BL_STATUS_INTERNAL = 9,
} BlStatus;

/**
 * Opaque trained lifter handle.
 */
typedef struct BlLifter BlLifter;

/**
 * Opaque body model handle.
 */
typedef struct BlModel BlModel;

/**
 * Oriented square crop in pixels; `angle` turns the crop's up axis onto
 * the hand axis.
 */
typedef struct BlCrop {
  double center_x;
  double center_y;
  double side;
  double angle;
} BlCrop;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Free the
 * result with [`bl_string_free`].
 */
char *bl_last_error_message(void);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void bl_string_free(char *s);

/**
 * Library version as a static NUL-terminated string.
 */
const char *bl_version(void);

/**
 * Load and validate a model file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum BlStatus bl_model_load(const char *path, struct BlModel **out);

/**
 * Build the procedural toy model with default sizes.
 *
 * # Safety
 * `out` must be writable.
 */
enum BlStatus bl_model_toy(uint64_t seed, struct BlModel **out);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not have been freed.
 */
void bl_model_free(struct BlModel *model);

/**
 * Number of landmarks `S`; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t bl_model_landmark_count(const struct BlModel *model);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t bl_model_vertex_count(const struct BlModel *model);

/**
 * # Safety
 * `model` must be null or a live handle.
 */
size_t bl_model_face_count(const struct BlModel *model);

/**
 * Length of a flat pose state for this model.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t bl_model_state_len(const struct BlModel *model);

/**
 * Write the identity state (`bl_model_state_len` values) into `out`.
 *
 * # Safety
 * `out` must hold `out_len` doubles.
 */
enum BlStatus bl_model_identity_state(const struct BlModel *model, double *out, size_t out_len);

/**
 * World landmarks of a state: `3·S` values.
 *
 * # Safety
 * `state` must hold `state_len` doubles and `out` `out_len` doubles.
 */
enum BlStatus bl_model_landmarks(const struct BlModel *model,
                                 const double *state,
                                 size_t state_len,
                                 double *out,
                                 size_t out_len);

/**
 * Skinned mesh vertices of a state: `3·N_v` values.
 *
 * # Safety
 * `state` must hold `state_len` doubles and `out` `out_len` doubles.
 */
enum BlStatus bl_model_vertices(const struct BlModel *model,
                                const double *state,
                                size_t state_len,
                                double *out,
                                size_t out_len);

/**
 * Write the mesh at `state` (or the rest mesh when `state` is null) as OBJ.
 *
 * # Safety
 * `state` must be null or hold `state_len` doubles; `path` must be a
 * NUL-terminated string.
 */
enum BlStatus bl_model_export_obj(const struct BlModel *model,
                                  const double *state,
                                  size_t state_len,
                                  const char *path);

/**
 * Load a lifter checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum BlStatus bl_lifter_load(const char *path, struct BlLifter **out);

/**
 * Release a lifter. Null is ignored.
 *
 * # Safety
 * `lifter` must come from this library and not have been freed.
 */
void bl_lifter_free(struct BlLifter *lifter);

/**
 * Input token count the lifter accepts; 0 for a null handle.
 *
 * # Safety
 * `lifter` must be null or a live handle.
 */
size_t bl_lifter_token_count(const struct BlLifter *lifter);

/**
 * Predict a flat state from `count` hip-centered landmarks (`3·count`
 * values). `count` must equal the lifter's token count.
 *
 * # Safety
 * `landmarks` must hold `3·count` doubles and `out` `out_len` doubles.
 */
enum BlStatus bl_lifter_predict(const struct BlLifter *lifter,
                                const double *landmarks,
                                size_t count,
                                double *out,
                                size_t out_len);

/**
 * Fit a problem given as JSON text; on success `*report_json` receives the
 * report as JSON, to be released with [`bl_string_free`].
 *
 * # Safety
 * `problem_json` must be a NUL-terminated string; `report_json` must be writable.
 */
enum BlStatus bl_fit_json(const struct BlModel *model,
                          const char *problem_json,
                          char **report_json);

/**
 * MPJPE and Procrustes-aligned MPJPE in millimeters between two sets of
 * `count` points in meters.
 *
 * # Safety
 * `pred` and `gt` must hold `3·count` doubles; the outputs must be writable.
 */
enum BlStatus bl_mpjpe(const double *pred,
                       const double *gt,
                       size_t count,
                       double *mpjpe_mm,
                       double *mpjpe_pa_mm);

/**
 * Crop around `count` 2D points (`2·count` values) whose axis runs from
 * point `axis_from` to point `axis_to`, scaled by `scale`.
 *
 * # Safety
 * `points` must hold `2·count` doubles; `out` must be writable.
 */
enum BlStatus bl_crop_from_landmarks(const double *points,
                                     size_t count,
                                     size_t axis_from,
                                     size_t axis_to,
                                     double scale,
                                     struct BlCrop *out);

/**
 * Intersection over union of two crops.
 */
double bl_crop_iou(struct BlCrop a, struct BlCrop b);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BODYLIFT_H */
