#ifndef METAGRAD_H
#define METAGRAD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by all entry points.
 */
typedef enum MgStatus {
  MG_STATUS_OK = 0,
  MG_STATUS_NULL_POINTER = 1,
  MG_STATUS_INVALID_ARGUMENT = 2,
  MG_STATUS_CONFIG = 3,
  MG_STATUS_SHAPE = 4,
  MG_STATUS_NUMERICAL = 5,
  MG_STATUS_IO = 6,
  MG_STATUS_SERIALIZATION = 7,
  MG_STATUS_UNSUPPORTED = 8,
  MG_STATUS_BUFFER_TOO_SMALL = 9,
  MG_STATUS_PANIC = 10,
} MgStatus;

/**
 * Kind of a stationary point of the deep 1D objective.
 */
typedef enum MgPointKind {
  MG_POINT_KIND_LOCAL_MAX = 0,
  MG_POINT_KIND_LOCAL_MIN = 1,
  MG_POINT_KIND_SADDLE = 2,
} MgPointKind;

/**
 * Opaque model handle.
 */
typedef struct MgModel MgModel;

/**
 * Stationary point `(a, b)` with its row-major Hessian.
 */
typedef struct MgStationaryPoint {
  double a;
  double b;
  enum MgPointKind kind;
  double hessian[4];
} MgStationaryPoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mg_version(void);

/**
 * Message of the last failure on this thread, or null after a success.
 * The pointer stays valid until the next call into the library on the
 * same thread.
 */
const char *mg_last_error(void);

/**
 * Closed-form shallow objective `2(1−α)²c²` of the model `ŷ = c·x`.
 */
enum MgStatus mg_shallow_maml_loss(double c, double alpha, double *out_loss);

/**
 * Expected post-adaptation loss of the deep model `ŷ = b·a·x` after one
 * simultaneous inner step of both factors.
 */
enum MgStatus mg_deep_maml_loss(double a, double b, double alpha, double *out_loss);

/**
 * Gradient of the deep MAML objective (twice the loss minus the noise
 * floor) with respect to `(a, b)`.
 */
enum MgStatus mg_deep_maml_grad(double a, double b, double alpha, double *out_da, double *out_db);

/**
 * One inner step of the deep model on task `theta`; with `freeze_a`
 * only `b` moves.
 */
enum MgStatus mg_deep_one_step_adapt(double a,
                                     double b,
                                     double theta,
                                     double alpha,
                                     bool freeze_a,
                                     double *out_a,
                                     double *out_b);

/**
 * Writes up to `capacity` stationary points of the deep objective and
 * stores the total in `out_count`. Pass a null buffer to query the count;
 * a short buffer yields `MG_STATUS_BUFFER_TOO_SMALL` with the count set.
 *
 * # Safety
 * `buffer` is null or valid for `capacity` writes.
 */
enum MgStatus mg_stationary_points(double alpha,
                                   struct MgStationaryPoint *buffer,
                                   size_t capacity,
                                   size_t *out_count);

/**
 * Builds a freshly initialised model from a JSON spec such as
 * `{"kind": "linnet", "input_dim": 2, "hidden": [2, 2], "output_dim": 1}`.
 */
enum MgStatus mg_model_build(const char *spec_json, uint64_t seed, struct MgModel **out_model);

/**
 * Loads the model stored in a checkpoint file.
 */
enum MgStatus mg_model_load(const char *path, struct MgModel **out_model);

/**
 * Writes the model as a checkpoint file without meta-optimizer state.
 */
enum MgStatus mg_model_save(const struct MgModel *model, const char *path);

/**
 * Input and output widths of the model.
 */
enum MgStatus mg_model_dims(const struct MgModel *model, size_t *out_input, size_t *out_output);

/**
 * Total number of scalar parameters.
 */
enum MgStatus mg_model_param_count(const struct MgModel *model, size_t *out_count);

/**
 * Raw outputs for `rows` inputs stored row-major in `x`
 * (`rows × input_dim`). `y` receives `rows × output_dim` values and
 * `y_len` is its capacity.
 *
 * # Safety
 * `x` holds `rows × input_dim` values and `y` holds `y_len` values.
 */
enum MgStatus mg_model_forward(const struct MgModel *model,
                               const double *x,
                               size_t rows,
                               double *y,
                               size_t y_len);

/**
 * Collapses a linear model into its single-layer equivalent, returning a
 * new handle. Nonlinear models yield `MG_STATUS_CONFIG`.
 */
enum MgStatus mg_model_collapse(const struct MgModel *model, struct MgModel **out_model);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` is null or a live handle from this library, freed only once.
 */
void mg_model_free(struct MgModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* METAGRAD_H */
