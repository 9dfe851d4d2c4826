#ifndef AGGMED_H
#define AGGMED_H

#pragma once

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Status codes. Values 2 to 12 equal the CLI exit codes of the same class.
 */
typedef enum AggmedStatus {
  AGGMED_STATUS_OK = 0,
  AGGMED_STATUS_NULL_POINTER = 1,
  AGGMED_STATUS_CONFIG = 2,
  AGGMED_STATUS_IO = 3,
  AGGMED_STATUS_PARSE = 4,
  AGGMED_STATUS_DATA = 5,
  AGGMED_STATUS_PARAMS = 6,
  AGGMED_STATUS_PROFILING = 7,
  AGGMED_STATUS_NO_SOLUTION = 8,
  AGGMED_STATUS_NON_DESCENT = 9,
  AGGMED_STATUS_SIMULATION = 10,
  AGGMED_STATUS_ORACLE = 11,
  AGGMED_STATUS_SELF_CHECK = 12,
  AGGMED_STATUS_BUFFER_TOO_SMALL = 13,
  AGGMED_STATUS_PANIC = 14,
} AggmedStatus;

/**
 * Opaque dataset handle (standardized columns, centered outcome).
 */
typedef struct AggmedDataset AggmedDataset;

/**
 * Opaque fit handle.
 */
typedef struct AggmedFit AggmedFit;

typedef struct AggmedFitOptions {
  double lambda_a;
  double lambda_b;
  double lambda_n;
  /**
   * Multiplier applied to both sparsity penalties.
   */
  double c_lambda;
  double rho;
  size_t restarts;
  size_t max_iter;
  uint64_t seed;
} AggmedFitOptions;

typedef struct AggmedCoefficients {
  double tau;
  double alpha;
  double gamma;
  double eta;
  double mp;
} AggmedCoefficients;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL terminated,
 * truncated to `len`). Returns the full message length excluding the NUL,
 * or 0 when there is none.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t aggmed_last_error(char *buf, size_t len);

/**
 * Static description of a status code.
 */
const char *aggmed_status_str(enum AggmedStatus status);

/**
 * Library version as a static string.
 */
const char *aggmed_version(void);

/**
 * Default fit options (no penalties, 10 restarts, seed 0).
 */
struct AggmedFitOptions aggmed_fit_options_default(void);

/**
 * Builds a dataset from row-major `x` (n×m), `m` (n×q) and `y` (n). Columns
 * are standardized and `y` centered.
 *
 * # Safety
 * Array pointers must be valid for the stated sizes; `out` must be writable.
 */
enum AggmedStatus aggmed_dataset_new(const double *x,
                                     const double *mediators,
                                     const double *y,
                                     size_t n,
                                     size_t m,
                                     size_t q,
                                     struct AggmedDataset **out);

/**
 * Simulates a dataset from the compound-symmetry generator and returns it
 * standardized. `target_mp` in (0, 1) selects partial mediation; any other
 * value gives complete mediation. Other generator settings take defaults.
 *
 * # Safety
 * `out` must be writable.
 */
enum AggmedStatus aggmed_dataset_simulate(size_t n,
                                          size_t m,
                                          size_t q,
                                          double rho_x,
                                          double rho_m,
                                          double target_mp,
                                          uint64_t seed,
                                          struct AggmedDataset **out);

/**
 * Writes n, m, q of a dataset. Any out pointer may be null.
 *
 * # Safety
 * `ds` must be a live handle.
 */
enum AggmedStatus aggmed_dataset_shape(const struct AggmedDataset *ds,
                                       size_t *n,
                                       size_t *m,
                                       size_t *q);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void aggmed_dataset_free(struct AggmedDataset *ds);

/**
 * Fits the penalized model. A null `opts` uses the defaults.
 *
 * # Safety
 * `ds` must be a live handle, `opts` null or valid, `out` writable.
 */
enum AggmedStatus aggmed_fit(const struct AggmedDataset *ds,
                             const struct AggmedFitOptions *opts,
                             struct AggmedFit **out);

/**
 * # Safety
 * `fit` must be null or a handle not yet freed.
 */
void aggmed_fit_free(struct AggmedFit *fit);

/**
 * # Safety
 * `fit` must be a live handle and `out` writable.
 */
enum AggmedStatus aggmed_fit_coefficients(const struct AggmedFit *fit,
                                          struct AggmedCoefficients *out);

/**
 * Objective value, iteration count and convergence flag. Any out pointer may
 * be null.
 *
 * # Safety
 * `fit` must be a live handle.
 */
enum AggmedStatus aggmed_fit_summary(const struct AggmedFit *fit,
                                     double *objective,
                                     size_t *iterations,
                                     bool *converged);

/**
 * Copies the exposure weights into `buf`. `written` receives the vector
 * length even when the buffer is too small.
 *
 * # Safety
 * `fit` must be a live handle, `buf` valid for `len` values.
 */
enum AggmedStatus aggmed_fit_weights_a(const struct AggmedFit *fit,
                                       double *buf,
                                       size_t len,
                                       size_t *written);

/**
 * Mediator counterpart of [`aggmed_fit_weights_a`].
 *
 * # Safety
 * `fit` must be a live handle, `buf` valid for `len` values.
 */
enum AggmedStatus aggmed_fit_weights_b(const struct AggmedFit *fit,
                                       double *buf,
                                       size_t len,
                                       size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AGGMED_H */
