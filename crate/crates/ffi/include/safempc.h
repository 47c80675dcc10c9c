#ifndef SAFEMPC_H
#define SAFEMPC_H

/* Generated by cbindgen; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result of a fallible call.
 */
typedef enum SafempcStatus {
  SAFEMPC_STATUS_OK = 0,
  SAFEMPC_STATUS_NULL_POINTER = 1,
  SAFEMPC_STATUS_DIMENSION_MISMATCH = 2,
  SAFEMPC_STATUS_INVALID_INPUT = 3,
  /**
   * Degenerate shape matrix or operand.
   */
  SAFEMPC_STATUS_DEGENERATE = 4,
  SAFEMPC_STATUS_NUMERICAL_FAILURE = 5,
  /**
   * The library panicked; the handle involved should not be used again.
   */
  SAFEMPC_STATUS_PANIC = 6,
} SafempcStatus;

typedef enum SafempcSystem {
  SAFEMPC_SYSTEM_PENDULUM = 0,
  SAFEMPC_SYSTEM_CART_POLE = 1,
} SafempcSystem;

/**
 * Ellipsoid `{x : (x − c)ᵀ Q⁻¹ (x − c) ≤ 1}`.
 */
typedef struct SafempcEllipsoid SafempcEllipsoid;

/**
 * Benchmark system with its prior model, safety controller and safe set.
 */
typedef struct SafempcEnv SafempcEnv;

/**
 * GP posterior over a vector-valued function.
 */
typedef struct SafempcGp SafempcGp;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *safempc_last_error_message(void);

/**
 * Creates an ellipsoid from its center (`n`) and shape matrix (`n×n`).
 *
 * # Safety
 * `center` and `shape` must hold `n` and `n*n` values; `out` must be
 * writable.
 */
enum SafempcStatus safempc_ellipsoid_new(const double *center,
                                         const double *shape,
                                         size_t n,
                                         struct SafempcEllipsoid **out);

/**
 * # Safety
 * `e` must come from this library and not be used afterwards. Null is
 * ignored.
 */
void safempc_ellipsoid_free(struct SafempcEllipsoid *e);

/**
 * Dimension of the ellipsoid, or 0 for a null handle.
 *
 * # Safety
 * `e` must be a live handle or null.
 */
size_t safempc_ellipsoid_dim(const struct SafempcEllipsoid *e);

/**
 * Copies the center into `out` (`len` must equal the dimension).
 *
 * # Safety
 * `e` must be a live handle and `out` must hold `len` values.
 */
enum SafempcStatus safempc_ellipsoid_center(const struct SafempcEllipsoid *e,
                                            double *out,
                                            size_t len);

/**
 * Copies the row-major shape matrix into `out` (`len` must equal `n*n`).
 *
 * # Safety
 * `e` must be a live handle and `out` must hold `len` values.
 */
enum SafempcStatus safempc_ellipsoid_shape(const struct SafempcEllipsoid *e,
                                           double *out,
                                           size_t len);

/**
 * Whether `x` lies in the ellipsoid up to `tol` on the quadratic form.
 *
 * # Safety
 * `e` must be a live handle, `x` must hold `n` values and `out` must be
 * writable.
 */
enum SafempcStatus safempc_ellipsoid_contains(const struct SafempcEllipsoid *e,
                                              const double *x,
                                              size_t n,
                                              double tol,
                                              bool *out);

/**
 * Image `A E + b` for a row-major `rows × n` matrix `A` and offset `b`.
 *
 * # Safety
 * `e` must be a live handle, `a` and `b` must hold `rows*n` and `rows`
 * values and `out` must be writable.
 */
enum SafempcStatus safempc_ellipsoid_affine(const struct SafempcEllipsoid *e,
                                            const double *a,
                                            size_t rows,
                                            const double *b,
                                            struct SafempcEllipsoid **out);

/**
 * Outer approximation of the Minkowski sum with the trace-optimal
 * parameter.
 *
 * # Safety
 * `a` and `b` must be live handles and `out` must be writable.
 */
enum SafempcStatus safempc_ellipsoid_minkowski_sum(const struct SafempcEllipsoid *a,
                                                   const struct SafempcEllipsoid *b,
                                                   struct SafempcEllipsoid **out);

/**
 * `max ‖S (x − c)‖₂` over the ellipsoid for a row-major `rows × n` matrix
 * `S`.
 *
 * # Safety
 * `e` must be a live handle, `s` must hold `rows*n` values and `out` must
 * be writable.
 */
enum SafempcStatus safempc_ellipsoid_max_scaled_distance(const struct SafempcEllipsoid *e,
                                                         const double *s,
                                                         size_t rows,
                                                         double *out);

/**
 * Fits a GP to `n` row-major inputs (`n × input_dim`) and targets
 * (`n × output_dim`). Every output uses the kernel
 * `Σᵢ wᵢ zᵢ z'ᵢ + σ² Matérn₅/₂(z, z'; ℓ)`; a null `linear_weights` drops
 * the linear part and a zero `signal_variance` drops the Matérn part, in
 * which case `lengthscales` may be null.
 *
 * # Safety
 * Array arguments must hold the stated number of values (`inputs` and
 * `targets` may be null when `n == 0`); `out` must be writable.
 */
enum SafempcStatus safempc_gp_fit(const double *inputs,
                                  const double *targets,
                                  size_t n,
                                  size_t input_dim,
                                  size_t output_dim,
                                  double noise_std,
                                  double beta,
                                  const double *lengthscales,
                                  double signal_variance,
                                  const double *linear_weights,
                                  struct SafempcGp **out);

/**
 * # Safety
 * `gp` must come from this library and not be used afterwards. Null is
 * ignored.
 */
void safempc_gp_free(struct SafempcGp *gp);

/**
 * Input dimension, or 0 for a null handle.
 *
 * # Safety
 * `gp` must be a live handle or null.
 */
size_t safempc_gp_input_dim(const struct SafempcGp *gp);

/**
 * Output dimension, or 0 for a null handle.
 *
 * # Safety
 * `gp` must be a live handle or null.
 */
size_t safempc_gp_output_dim(const struct SafempcGp *gp);

/**
 * Posterior mean and standard deviation at `z` (`d` values). `mean` and
 * `std` receive `p` values each; `std` may be null.
 *
 * # Safety
 * `gp` must be a live handle and the buffers must hold the stated number of
 * values.
 */
enum SafempcStatus safempc_gp_predict(const struct SafempcGp *gp,
                                      const double *z,
                                      size_t d,
                                      double *mean,
                                      double *std,
                                      size_t p);

/**
 * Mutual information between the training observations and the function.
 *
 * # Safety
 * `gp` must be a live handle and `out` must be writable.
 */
enum SafempcStatus safempc_gp_mutual_information(const struct SafempcGp *gp, double *out);

/**
 * Builds a benchmark system, given as a [`SafempcSystem`] value, with its
 * default configuration.
 *
 * # Safety
 * `out` must be writable.
 */
enum SafempcStatus safempc_env_new(int32_t system, struct SafempcEnv **out);

/**
 * # Safety
 * `env` must come from this library and not be used afterwards. Null is
 * ignored.
 */
void safempc_env_free(struct SafempcEnv *env);

/**
 * State dimension, or 0 for a null handle.
 *
 * # Safety
 * `env` must be a live handle or null.
 */
size_t safempc_env_state_dim(const struct SafempcEnv *env);

/**
 * Input dimension, or 0 for a null handle.
 *
 * # Safety
 * `env` must be a live handle or null.
 */
size_t safempc_env_input_dim(const struct SafempcEnv *env);

/**
 * One step of the true dynamics from `x` under `u`; `next` receives the
 * state.
 *
 * # Safety
 * `env` must be a live handle; `x`, `u` and `next` must hold the state,
 * input and state dimension respectively.
 */
enum SafempcStatus safempc_env_step(const struct SafempcEnv *env,
                                    const double *x,
                                    const double *u,
                                    double *next);

/**
 * Input of the safety controller at `x`.
 *
 * # Safety
 * `env` must be a live handle; `x` and `u` must hold the state and input
 * dimension respectively.
 */
enum SafempcStatus safempc_env_safety_input(const struct SafempcEnv *env,
                                            const double *x,
                                            double *u);

/**
 * Whether `x` lies in the safe set.
 *
 * # Safety
 * `env` must be a live handle, `x` must hold the state dimension and `out`
 * must be writable.
 */
enum SafempcStatus safempc_env_in_safe_set(const struct SafempcEnv *env,
                                           const double *x,
                                           bool *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAFEMPC_H */
