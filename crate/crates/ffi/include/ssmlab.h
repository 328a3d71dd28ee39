#ifndef SSMLAB_H
#define SSMLAB_H

/* Generated by cbindgen from ssmlab-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every entry point.
 */
typedef enum SsmlabStatus {
  SSMLAB_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  SSMLAB_STATUS_NULL_ARGUMENT = 1,
  /**
   * Malformed spec string, bad configuration, or shape mismatch.
   */
  SSMLAB_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Input outside the mathematical domain of the operation.
   */
  SSMLAB_STATUS_DOMAIN_ERROR = 3,
  /**
   * Non-finite values appeared during evaluation.
   */
  SSMLAB_STATUS_NUMERIC_ERROR = 4,
  /**
   * File could not be read or parsed.
   */
  SSMLAB_STATUS_IO_ERROR = 5,
  /**
   * The implementation panicked; state is still consistent.
   */
  SSMLAB_STATUS_INTERNAL_ERROR = 6,
} SsmlabStatus;

/**
 * Opaque state-space model handle.
 */
typedef struct SsmlabModel SsmlabModel;

/**
 * Opaque reparameterization-scheme handle.
 */
typedef struct SsmlabScheme SsmlabScheme;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread. Never NULL.
 */
const char *ssmlab_last_error_message(void);

/**
 * Parse a scheme spec string (`family[:a=<v>,b=<v>]@{cont|disc}`, e.g.
 * `best:a=1,b=0.5@disc`) into a new handle.
 *
 * # Safety
 * `spec` must point to a NUL-terminated string and `out` to writable
 * storage for one pointer.
 */
enum SsmlabStatus ssmlab_scheme_parse(const char *spec, struct SsmlabScheme **out);

/**
 * Release a scheme handle. NULL is ignored.
 *
 * # Safety
 * `scheme` must be a pointer from [`ssmlab_scheme_parse`], not yet freed.
 */
void ssmlab_scheme_free(struct SsmlabScheme *scheme);

/**
 * The eigenvalue `lambda = f(w)`.
 *
 * # Safety
 * `scheme` must be a live handle; `out` must be writable.
 */
enum SsmlabStatus ssmlab_scheme_apply(const struct SsmlabScheme *scheme, double w, double *out);

/**
 * The derivative `f'(w)` (left derivative at the ReLU kink).
 *
 * # Safety
 * As [`ssmlab_scheme_apply`].
 */
enum SsmlabStatus ssmlab_scheme_derivative(const struct SsmlabScheme *scheme,
                                           double w,
                                           double *out);

/**
 * Gradient-scale function `|f'(w)|/f(w)^2` (continuous) or
 * `|f'(w)|/(1-f(w))^2` (discrete).
 *
 * # Safety
 * As [`ssmlab_scheme_apply`].
 */
enum SsmlabStatus ssmlab_scheme_gradient_scale(const struct SsmlabScheme *scheme,
                                               double w,
                                               double *out);

/**
 * Stability gap at weight `w` and radius `beta` (continuous schemes).
 * Divergent perturbations report `+inf` through `out`, not an error.
 *
 * # Safety
 * As [`ssmlab_scheme_apply`].
 */
enum SsmlabStatus ssmlab_scheme_stability_gap(const struct SsmlabScheme *scheme,
                                              double w,
                                              double beta,
                                              double *out);

/**
 * Certified stability bound `g(beta)` where one exists (exponential,
 * softplus, continuous best).
 *
 * # Safety
 * As [`ssmlab_scheme_apply`].
 */
enum SsmlabStatus ssmlab_scheme_stability_bound(const struct SsmlabScheme *scheme,
                                                double w,
                                                double beta,
                                                double *out);

/**
 * Closed-form inverse `w = f^{-1}(lambda)` (nonnegative root for the even
 * best family).
 *
 * # Safety
 * As [`ssmlab_scheme_apply`].
 */
enum SsmlabStatus ssmlab_scheme_invert(const struct SsmlabScheme *scheme,
                                       double lambda,
                                       double *out);

/**
 * Load a model from a checkpoint JSON file written by the `ssmlab` CLI.
 *
 * # Safety
 * `path` must point to a NUL-terminated path string and `out` to writable
 * storage for one pointer.
 */
enum SsmlabStatus ssmlab_model_load(const char *path, struct SsmlabModel **out);

/**
 * Release a model handle. NULL is ignored.
 *
 * # Safety
 * `model` must be a pointer from [`ssmlab_model_load`], not yet freed.
 */
void ssmlab_model_free(struct SsmlabModel *model);

/**
 * Hidden width `m` and input dimension `d` of a loaded model.
 *
 * # Safety
 * `model` must be a live handle; `m` and `d` must be writable.
 */
enum SsmlabStatus ssmlab_model_dims(const struct SsmlabModel *model, uintptr_t *m, uintptr_t *d);

/**
 * Whether the model integrates continuous-time dynamics (1) or a discrete
 * recurrence (0).
 *
 * # Safety
 * `model` must be a live handle; `continuous` must be writable.
 */
enum SsmlabStatus ssmlab_model_is_continuous(const struct SsmlabModel *model, int32_t *continuous);

/**
 * Run the model over a sequence. `x` holds `k * d` row-major samples and
 * `y` receives `k` outputs.
 *
 * # Safety
 * `model` must be a live handle; `x` must hold `x_len` readable doubles;
 * `y` must hold `y_len` writable doubles.
 */
enum SsmlabStatus ssmlab_model_forward(const struct SsmlabModel *model,
                                       const double *x,
                                       uintptr_t x_len,
                                       double *y,
                                       uintptr_t y_len);

/**
 * Crate version as a static string.
 */
const char *ssmlab_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SSMLAB_H */
