#ifndef DKP_H
#define DKP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by all functions.
 */
typedef enum DkpStatus {
  DKP_STATUS_OK = 0,
  DKP_STATUS_INVALID_ARGUMENT = 1,
  DKP_STATUS_CONFIG = 2,
  DKP_STATUS_NUMERIC = 3,
  DKP_STATUS_IO = 4,
  DKP_STATUS_PANIC = 5,
} DkpStatus;

/**
 * Opaque trained model.
 */
typedef struct DkpModel DkpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *dkp_version(void);

/**
 * Message for the last failed call on this thread; empty after success.
 * The pointer stays valid until the next call into the library on this thread.
 */
const char *dkp_last_error(void);

/**
 * Loads a `checkpoint.json` written by `dkp train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DkpStatus dkp_model_load(const char *path, struct DkpModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`dkp_model_load`] and not be used afterwards.
 */
void dkp_model_free(struct DkpModel *model);

/**
 * Input and output dimensions of a model.
 *
 * # Safety
 * `model` must be a live handle; either output pointer may be null.
 */
enum DkpStatus dkp_model_dims(const struct DkpModel *model, size_t *input_dim, size_t *output_dim);

/**
 * Posterior predictive mean (and variance for Gaussian models) at `n` inputs.
 *
 * `x` holds `n * input_dim` values; `mean` receives `n * output_dim` values
 * (class probabilities for categorical models). `variance` may be null.
 *
 * # Safety
 * All non-null pointers must address arrays of the stated sizes.
 */
enum DkpStatus dkp_model_predict(const struct DkpModel *model,
                                 const double *x,
                                 size_t n,
                                 size_t n_samples,
                                 uint64_t seed,
                                 double *mean,
                                 double *variance);

/**
 * One draw from `W^{-1}(scale, dof)` with a `p x p` scale; mean `scale / (dof - p - 1)`.
 *
 * # Safety
 * `scale` and `out` must address `p * p` values.
 */
enum DkpStatus dkp_sample_invwishart(const double *scale,
                                     size_t p,
                                     double dof,
                                     uint64_t seed,
                                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DKP_H */
