#ifndef MPGELU_H
#define MPGELU_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define MPGELU_ARCH_MP_GELU 0

#define MPGELU_ARCH_RELU 1

#define MPGELU_COV_FULL 0

#define MPGELU_COV_DIAGONAL 1

/**
 * Two outputs `(h1, h2)` with `p(y|h) = N(y | h1, exp(h2))`.
 */
#define MPGELU_HEAD_HETEROSCEDASTIC2 0

/**
 * One mean output; predictive variance is the epistemic part only.
 */
#define MPGELU_HEAD_HOMOSCEDASTIC1 1

typedef enum MpgeluStatus {
  MPGELU_STATUS_OK = 0,
  MPGELU_STATUS_NULL_POINTER = 1,
  MPGELU_STATUS_INVALID_ARGUMENT = 2,
  MPGELU_STATUS_DIMENSION_MISMATCH = 3,
  MPGELU_STATUS_NUMERICAL_ERROR = 4,
  MPGELU_STATUS_IO_ERROR = 5,
  MPGELU_STATUS_PARSE_ERROR = 6,
  MPGELU_STATUS_PANIC = 7,
} MpgeluStatus;

/**
 * Opaque model handle.
 */
typedef struct MpgeluModel MpgeluModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread; do not free.
 */
const char *mpgelu_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mpgelu_version(void);

/**
 * Builds a model with seeded Glorot-uniform weights and zero biases.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum MpgeluStatus mpgelu_model_new(int32_t architecture,
                                   size_t input_dim,
                                   size_t hidden_width,
                                   double dropout_rate,
                                   int32_t covariance_mode,
                                   int32_t head,
                                   uint64_t seed,
                                   struct MpgeluModel **out);

/**
 * Loads a JSON model document.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MpgeluStatus mpgelu_model_load(const char *path, struct MpgeluModel **out);

/**
 * Writes the model as a JSON document.
 *
 * # Safety
 * `model` must come from this library; `path` must be a NUL-terminated string.
 */
enum MpgeluStatus mpgelu_model_save(const struct MpgeluModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void mpgelu_model_free(struct MpgeluModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum MpgeluStatus mpgelu_model_input_dim(const struct MpgeluModel *model, size_t *out);

/**
 * Number of head units: 2 for the heteroscedastic head, 1 otherwise.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum MpgeluStatus mpgelu_model_output_dim(const struct MpgeluModel *model, size_t *out);

/**
 * Head moments for one input: `mean_out` gets `D` entries and `cov_out` the
 * `D × D` covariance (off-diagonals zero in diagonal mode), `D` the output dim.
 *
 * # Safety
 * `x` must hold `x_len` doubles; the output buffers must hold `D` and `D*D` doubles.
 */
enum MpgeluStatus mpgelu_model_forward(const struct MpgeluModel *model,
                                       const double *x,
                                       size_t x_len,
                                       double *mean_out,
                                       double *cov_out);

/**
 * Predictive mean and variance for `rows` inputs stored row-major in `x`.
 *
 * # Safety
 * `x` must hold `rows * input_dim` doubles; each output buffer `rows` doubles.
 */
enum MpgeluStatus mpgelu_model_predict(const struct MpgeluModel *model,
                                       const double *x,
                                       size_t rows,
                                       double *mean_out,
                                       double *var_out);

/**
 * Continues training with seeded mini-batch SGD on the mean negative expected
 * log-likelihood. Writes the last epoch's mean loss to `final_loss` when non-null.
 * On failure the model is left unchanged.
 *
 * # Safety
 * `model` must be a live handle; `x` must hold `rows * input_dim` doubles and `y` `rows` doubles.
 */
enum MpgeluStatus mpgelu_model_train(struct MpgeluModel *model,
                                     const double *x,
                                     const double *y,
                                     size_t rows,
                                     double learning_rate,
                                     size_t epochs,
                                     size_t batch_size,
                                     uint64_t seed,
                                     double *final_loss);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MPGELU_H */
