#ifndef OPFREE_H
#define OPFREE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum OpfreeStatus {
  OPFREE_STATUS_OK = 0,
  OPFREE_STATUS_NULL_POINTER = 1,
  OPFREE_STATUS_INVALID_UTF8 = 2,
  OPFREE_STATUS_SCHEMA = 3,
  OPFREE_STATUS_DOMAIN = 4,
  OPFREE_STATUS_CONVERGENCE = 5,
  OPFREE_STATUS_BUFFER_TOO_SMALL = 6,
  OPFREE_STATUS_PANIC = 7,
} OpfreeStatus;

/**
 * Output of a command: CSV text or a JSON report.
 */
typedef struct OpfreeOutput OpfreeOutput;

/**
 * A parsed problem spec.
 */
typedef struct OpfreeProblem OpfreeProblem;

/**
 * Optional overrides for [`opfree_run_with`]; zero / null fields mean "unset".
 */
typedef struct OpfreeRunArgs {
  size_t degree;
  size_t depth;
  /**
   * JSON matrix or array of matrices; may be null.
   */
  const char *z_json;
  double grid_a;
  double grid_b;
  /**
   * Number of grid points; 0 leaves the grid unset.
   */
  size_t grid_points;
  /**
   * Imaginary offset for densities; values <= 0 leave it unset.
   */
  double eps;
  uint64_t seed;
  bool has_seed;
} OpfreeRunArgs;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *opfree_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *opfree_version(void);

/**
 * Parses a JSON problem spec into `*out`.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum OpfreeStatus opfree_problem_parse(const char *json, struct OpfreeProblem **out);

/**
 * Releases a problem; null is ignored.
 *
 * # Safety
 * `p` must come from [`opfree_problem_parse`] and not be used afterwards.
 */
void opfree_problem_free(struct OpfreeProblem *p);

/**
 * Matrix size `d` of `B = M_d`, or 0 for null.
 *
 * # Safety
 * `p` must be null or a live problem handle.
 */
size_t opfree_problem_dim(const struct OpfreeProblem *p);

/**
 * Runs a command (`moments`, `cumulants`, `convolve-power`, `nfold-sum`, `subordinate`,
 * `density`, `verify`, `verify-section5`) with default arguments.
 *
 * # Safety
 * `p` must be a live problem, `command` NUL-terminated, `out` valid.
 */
enum OpfreeStatus opfree_run(const struct OpfreeProblem *p,
                             const char *command,
                             struct OpfreeOutput **out);

/**
 * As [`opfree_run`], with overrides.
 *
 * # Safety
 * As [`opfree_run`]; `args` must be valid and `args.z_json` null or NUL-terminated.
 */
enum OpfreeStatus opfree_run_with(const struct OpfreeProblem *p,
                                  const char *command,
                                  const struct OpfreeRunArgs *args,
                                  struct OpfreeOutput **out);

/**
 * Text of an output (CSV or JSON), or null. Valid while the output lives.
 *
 * # Safety
 * `o` must be null or a live output handle.
 */
const char *opfree_output_text(const struct OpfreeOutput *o);

/**
 * False only for a verification report that did not pass.
 *
 * # Safety
 * `o` must be null or a live output handle.
 */
bool opfree_output_passed(const struct OpfreeOutput *o);

/**
 * Releases an output; null is ignored.
 *
 * # Safety
 * `o` must come from a run call and not be used afterwards.
 */
void opfree_output_free(struct OpfreeOutput *o);

/**
 * Writes `E[X^k]`, `k = 1..=degree`, of `mu` as row-major `d x d` blocks into `re`/`im`
 * (each of length at least `degree * d * d`).
 *
 * # Safety
 * `p` must be a live problem; `re` and `im` must hold `len` doubles.
 */
enum OpfreeStatus opfree_moments(const struct OpfreeProblem *p,
                                 size_t degree,
                                 double *re,
                                 double *im,
                                 size_t len);

/**
 * As [`opfree_moments`], for `mu^{boxplus eta}` through the cumulant route.
 *
 * # Safety
 * As [`opfree_moments`].
 */
enum OpfreeStatus opfree_convolve_power_moments(const struct OpfreeProblem *p,
                                                size_t degree,
                                                double *re,
                                                double *im,
                                                size_t len);

/**
 * Cauchy transform of `mu^{boxplus eta}` at a `d x d` point `z` (row-major `re`/`im`,
 * `d * d` entries each), computed through subordination; writes `G(z)` and the
 * fixed-point residual.
 *
 * # Safety
 * `p` must be a live problem; all pointers valid for `d * d` doubles (`residual`: one).
 */
enum OpfreeStatus opfree_convolve_power_cauchy(const struct OpfreeProblem *p,
                                               const double *z_re,
                                               const double *z_im,
                                               double *g_re,
                                               double *g_im,
                                               double *residual);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OPFREE_H */
