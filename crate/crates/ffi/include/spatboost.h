#ifndef SPATBOOST_H
#define SPATBOOST_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum SbStatus {
  SB_STATUS_OK = 0,
  SB_STATUS_NULL_POINTER = 1,
  /**
   * Bad argument, shape mismatch, unknown column or degenerate design.
   */
  SB_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Weight matrix is not a valid neighborhood structure.
   */
  SB_STATUS_INVALID_TOPOLOGY = 3,
  SB_STATUS_NON_FINITE = 4,
  SB_STATUS_NON_IDENTIFIED = 5,
  SB_STATUS_RANK_DEFICIENT = 6,
  SB_STATUS_SINGULAR = 7,
  SB_STATUS_IO = 8,
  /**
   * A Rust panic was caught at the boundary.
   */
  SB_STATUS_INTERNAL = 9,
} SbStatus;

typedef enum SbVariant {
  SB_VARIANT_LS_GB = 0,
  SB_VARIANT_GB_GB = 1,
  SB_VARIANT_DS_GB = 2,
  SB_VARIANT_DS_DS = 3,
  SB_VARIANT_FGLS = 4,
} SbVariant;

/**
 * Result of one estimator variant.
 */
typedef struct SbFit SbFit;

/**
 * Sparse spatial weight matrix.
 */
typedef struct SbWeights SbWeights;

/**
 * Tuning options for `sb_fit`. Start from `sb_fit_options_default`.
 */
typedef struct SbFitOptions {
  enum SbVariant variant;
  double learning_rate;
  size_t m_max;
  size_t folds;
  double subsample_fraction;
  double tau;
  uint64_t seed;
  /**
   * Non-zero skips tuning and stops every boosting step here.
   */
  size_t fixed_m_stop;
} SbFitOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or NULL if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *sb_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sb_version(void);

/**
 * Circular-world weights: each of `n` locations linked to its `k`
 * predecessors and `k` successors. `normalize` row-normalizes.
 *
 * # Safety
 * `out` must be writable.
 */
enum SbStatus sb_weights_circular(size_t n, size_t k, bool normalize, struct SbWeights **out);

/**
 * k-nearest-neighbor weights from planar coordinates `xs`, `ys` of length `n`.
 *
 * # Safety
 * `xs` and `ys` must point to `n` readable doubles.
 */
enum SbStatus sb_weights_knn(const double *xs,
                             const double *ys,
                             size_t n,
                             size_t k,
                             bool normalize,
                             struct SbWeights **out);

/**
 * Weights from `nnz` zero-based triplets `(rows[t], cols[t], vals[t])`.
 *
 * # Safety
 * `rows`, `cols` and `vals` must each point to `nnz` readable elements.
 */
enum SbStatus sb_weights_from_triplets(size_t n,
                                       const size_t *rows,
                                       const size_t *cols,
                                       const double *vals,
                                       size_t nnz,
                                       struct SbWeights **out);

/**
 * Row-normalized copy of `w`.
 *
 * # Safety
 * `w` must be a live handle.
 */
enum SbStatus sb_weights_row_normalize(const struct SbWeights *w, struct SbWeights **out);

/**
 * Number of locations, or 0 for NULL.
 *
 * # Safety
 * `w` must be NULL or a live handle.
 */
size_t sb_weights_n(const struct SbWeights *w);

/**
 * Number of stored non-zeros, or 0 for NULL.
 *
 * # Safety
 * `w` must be NULL or a live handle.
 */
size_t sb_weights_nnz(const struct SbWeights *w);

/**
 * # Safety
 * `w` must be NULL or a handle not yet freed.
 */
void sb_weights_free(struct SbWeights *w);

/**
 * Default options for `variant`.
 */
struct SbFitOptions sb_fit_options_default(enum SbVariant variant);

/**
 * Fits one estimator variant.
 *
 * `z` is the `n × q` design in column-major order, `y` the response of
 * length `n`. `names` may be NULL, in which case columns are named
 * `Z1..Zq`. `opts` may be NULL for the DS-DS defaults.
 *
 * # Safety
 * Pointers must reference arrays of the stated sizes; `w` must be a live handle.
 */
enum SbStatus sb_fit(const double *z,
                     size_t n,
                     size_t q,
                     const char *const *names,
                     const double *y,
                     const struct SbWeights *w,
                     const struct SbFitOptions *opts,
                     struct SbFit **out);

/**
 * # Safety
 * `fit` must be NULL or a live handle.
 */
double sb_fit_lambda(const struct SbFit *fit);

/**
 * # Safety
 * `fit` must be NULL or a live handle.
 */
double sb_fit_sigma2(const struct SbFit *fit);

/**
 * # Safety
 * `fit` must be NULL or a live handle.
 */
double sb_fit_intercept(const struct SbFit *fit);

/**
 * Final stopping iteration (0 for FGLS or NULL).
 *
 * # Safety
 * `fit` must be NULL or a live handle.
 */
size_t sb_fit_m_opt(const struct SbFit *fit);

/**
 * Number of design columns, or 0 for NULL.
 *
 * # Safety
 * `fit` must be NULL or a live handle.
 */
size_t sb_fit_q(const struct SbFit *fit);

/**
 * Copies the `q` coefficients into `out` (length `len`, must equal `q`).
 *
 * # Safety
 * `out` must point to `len` writable doubles; `fit` must be a live handle.
 */
enum SbStatus sb_fit_coefficients(const struct SbFit *fit, double *out, size_t len);

/**
 * Writes 1 for each selected column and 0 otherwise (length `len == q`).
 *
 * # Safety
 * `out` must point to `len` writable bytes; `fit` must be a live handle.
 */
enum SbStatus sb_fit_selected(const struct SbFit *fit, uint8_t *out, size_t len);

/**
 * Trend prediction for a new `n_new × q` column-major design whose columns
 * are in the model's order.
 *
 * # Safety
 * `z` must point to `n_new*q` doubles, `out` to `n_new` writable doubles.
 */
enum SbStatus sb_fit_predict(const struct SbFit *fit,
                             const double *z,
                             size_t n_new,
                             size_t q,
                             double *out);

/**
 * Full result as a JSON string owned by the caller; release it with
 * `sb_string_free`.
 *
 * # Safety
 * `fit` must be a live handle and `out` writable.
 */
enum SbStatus sb_fit_to_json(const struct SbFit *fit, char **out);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library and not yet freed.
 */
void sb_string_free(char *s);

/**
 * # Safety
 * `fit` must be NULL or a handle not yet freed.
 */
void sb_fit_free(struct SbFit *fit);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPATBOOST_H */
