#ifndef RWN_H
#define RWN_H

/* Generated with cbindgen:0.29.4 */

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
enum RwnStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  RWN_STATUS_OK = 0,
  RWN_STATUS_INVALID_INPUT = 1,
  RWN_STATUS_FORMAT = 2,
  RWN_STATUS_UNSUPPORTED_VERSION = 3,
  RWN_STATUS_MISSING_FILE = 4,
  RWN_STATUS_IO = 5,
  RWN_STATUS_CONVERGENCE = 6,
  RWN_STATUS_DIVERGENCE = 7,
  RWN_STATUS_UNDEFINED_RECALL = 8,
  RWN_STATUS_NULL_POINTER = 9,
  RWN_STATUS_PANIC = 10,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum RwnStatus RwnStatus;
#else
typedef int32_t RwnStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Trained model: filter bank, affinity head and unary branch.
 */
typedef struct RwnModel RwnModel;

/**
 * Row-stochastic transition matrix over the pixels of one image.
 */
typedef struct RwnTransition RwnTransition;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *rwn_version(void);

/**
 * Length in bytes of the calling thread's last error message, without the
 * terminating NUL. Zero after a successful call.
 */
size_t rwn_last_error_length(void);

/**
 * Copies the last error message into `buf` as a NUL-terminated string,
 * truncating to `len - 1` bytes. Returns the number of bytes written
 * before the NUL.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes of writes.
 */
size_t rwn_last_error_message(char *buf, size_t len);

/**
 * Reads a checkpoint file into a new model handle stored in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for one write.
 */
RwnStatus rwn_model_load(const char *path, struct RwnModel **out);

/**
 * Writes the model to a checkpoint file.
 *
 * # Safety
 * `model` must come from [`rwn_model_load`] and `path` be NUL-terminated.
 */
RwnStatus rwn_model_save(const struct RwnModel *model, const char *path);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or come from [`rwn_model_load`], and not be used afterwards.
 */
void rwn_model_free(struct RwnModel *model);

/**
 * Number of classes `m` the model predicts; zero for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t rwn_model_num_classes(const struct RwnModel *model);

/**
 * Number of feature channels `k`, which equals the number of affinity
 * parameters; zero for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t rwn_model_num_channels(const struct RwnModel *model);

/**
 * Labels one RGB image. `steps` is the number of damped walk steps, or any
 * negative value to iterate to convergence; zero returns the unary
 * prediction. `labels_out` receives `height * width` class indices and
 * `scores_out`, when not null, the `height * width * m` diffused scores.
 *
 * # Safety
 * `rgb` must hold `height * width * 3` values, `labels_out` have room for
 * `height * width` values and `scores_out` be null or have room for
 * `height * width * m` values.
 */
RwnStatus rwn_model_infer(const struct RwnModel *model,
                          size_t height,
                          size_t width,
                          const double *rgb,
                          int64_t steps,
                          size_t radius,
                          double alpha,
                          uint32_t *labels_out,
                          double *scores_out);

/**
 * Builds the oracle transition matrix of a label map: neighbors within
 * `radius` sharing a label get affinity one, all others zero.
 *
 * # Safety
 * `labels` must hold `height * width` values and `out` be valid for one write.
 */
RwnStatus rwn_transition_oracle(const uint32_t *labels,
                                size_t height,
                                size_t width,
                                size_t radius,
                                struct RwnTransition **out);

/**
 * Number of pixels the transition matrix covers; zero for a null handle.
 *
 * # Safety
 * `a` must be null or a live handle.
 */
size_t rwn_transition_num_pixels(const struct RwnTransition *a);

/**
 * Releases a transition handle. Null is ignored.
 *
 * # Safety
 * `a` must be null or come from [`rwn_transition_oracle`], and not be used afterwards.
 */
void rwn_transition_free(struct RwnTransition *a);

/**
 * Diffuses `m`-class potentials with `a`. `steps` counts damped walk steps;
 * a negative value iterates to convergence.
 *
 * # Safety
 * `potentials` and `out` must each hold `num_pixels * m` values.
 */
RwnStatus rwn_diffuse(const struct RwnTransition *a,
                      const double *potentials,
                      size_t m,
                      double alpha,
                      int64_t steps,
                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RWN_H */
