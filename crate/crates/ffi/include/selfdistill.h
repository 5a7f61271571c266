#ifndef SELFDISTILL_H
#define SELFDISTILL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  SD_STATUS_OK = 0,
  /**
   * Inputs violate a precondition.
   */
  SD_STATUS_INVALID = 1,
  /**
   * A numerical procedure failed.
   */
  SD_STATUS_NUMERICAL = 2,
  SD_STATUS_NULL_POINTER = 3,
  /**
   * The caller's buffer is too small; the required length is reported.
   */
  SD_STATUS_BUFFER_TOO_SMALL = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  SD_STATUS_INTERNAL = 5,
} SdStatus;

typedef enum {
  SD_CASE_CASE_I = 1,
  SD_CASE_CASE_II = 2,
  SD_CASE_CASE_III = 3,
  SD_CASE_CASE_IV = 4,
  SD_CASE_CASE_V = 5,
} SdCase;

typedef enum {
  SD_CORRUPTION_KIND_SYMMETRIC = 0,
  SD_CORRUPTION_KIND_ASYMMETRIC = 1,
  SD_CORRUPTION_KIND_SUPERCLASS = 2,
} SdCorruptionKind;

typedef enum {
  SD_ACCURACY_MODE_SD = 0,
  SD_ACCURACY_MODE_PLL = 1,
} SdAccuracyMode;

typedef struct SdCorruption SdCorruption;

typedef struct SdGramModel SdGramModel;

typedef struct SdTheory SdTheory;

typedef struct {
  double p;
  double q;
  /**
   * `q/p`.
   */
  double ratio;
  double lambda;
  size_t k;
  size_t n;
  /**
   * Number of superclass ratios available from `sd_theory_r`.
   */
  size_t num_superclasses;
} SdTheoryScalars;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *sd_last_error_message(void);

/**
 * Creates a Gram model. `omega` (length `k`) is read only for Case II;
 * `superclass_sizes` (length `num_superclasses`) only for Case IV/V, where
 * `k` must equal their sum.
 *
 * # Safety
 * Pointers must be null or valid for the stated lengths; `out` must be
 * writable.
 */
SdStatus sd_gram_model_new(SdCase case_,
                           size_t k,
                           size_t n,
                           double c,
                           double d,
                           double e,
                           const double *omega,
                           const size_t *superclass_sizes,
                           size_t num_superclasses,
                           SdGramModel **out);

/**
 * # Safety
 * `model` must be null or a handle from `sd_gram_model_new` not yet freed.
 */
void sd_gram_model_free(SdGramModel *model);

/**
 * Writes the `Kn × Kn` Gram matrix (row-major) into `buf`.
 *
 * # Safety
 * `buf` must be valid for `len` writes.
 */
SdStatus sd_gram_model_build(const SdGramModel *model, double *buf, size_t len);

/**
 * Builds a standard corruption matrix. `model` supplies the superclass map
 * for `SD_CORRUPTION_KIND_SUPERCLASS` and may otherwise be null.
 *
 * # Safety
 * `model` must be null or a live handle; `out` must be writable.
 */
SdStatus sd_corruption_new(SdCorruptionKind kind,
                           double eta,
                           size_t k,
                           const SdGramModel *model,
                           SdCorruption **out);

/**
 * Wraps an explicit row-major `k × k` matrix; rows and columns must sum to 1.
 *
 * # Safety
 * `entries` must be valid for `k * k` reads; `out` must be writable.
 */
SdStatus sd_corruption_from_entries(const double *entries, size_t k, SdCorruption **out);

/**
 * # Safety
 * `c` must be null or a live handle.
 */
void sd_corruption_free(SdCorruption *c);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
SdStatus sd_theory_new(const SdGramModel *model, double lambda, SdTheory **out);

/**
 * # Safety
 * `theory` must be null or a live handle.
 */
void sd_theory_free(SdTheory *theory);

/**
 * # Safety
 * `theory` must be a live handle; `out` must be writable.
 */
SdStatus sd_theory_scalars(const SdTheory *theory, SdTheoryScalars *out);

/**
 * Copies the superclass ratios `r_s` into `buf`.
 *
 * # Safety
 * `buf` must be valid for `len` writes.
 */
SdStatus sd_theory_r(const SdTheory *theory, double *buf, size_t len);

/**
 * Whether the `t`-round model reaches 100% population accuracy.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
SdStatus sd_sd_condition(const SdCorruption *c, const SdTheory *theory, uint32_t t, bool *out);

/**
 * Whether the top-2 student reaches 100% population accuracy.
 *
 * # Safety
 * `c` must be live; `out` must be writable.
 */
SdStatus sd_pll_condition(const SdCorruption *c, bool *out);

/**
 * Smallest number of rounds reaching 100% accuracy. `*reachable` is false
 * (and `*rounds` 0) when no number of rounds suffices.
 *
 * # Safety
 * Handles must be live; outputs must be writable.
 */
SdStatus sd_minimal_rounds(const SdCorruption *c,
                           const SdTheory *theory,
                           uint32_t *rounds,
                           bool *reachable);

/**
 * # Safety
 * Handles must be live; `out` must be writable.
 */
SdStatus sd_predicted_accuracy(const SdCorruption *c,
                               const SdTheory *theory,
                               uint32_t t,
                               SdAccuracyMode mode,
                               double *out);

/**
 * Round-`t` closed-form output (length K) of a sample with the given true
 * and given labels.
 *
 * # Safety
 * Handles must be live; `buf` must be valid for `len` writes.
 */
SdStatus sd_closed_form_output(const SdCorruption *c,
                               const SdTheory *theory,
                               size_t true_label,
                               size_t given_label,
                               uint32_t t,
                               double *buf,
                               size_t len);

/**
 * Output (length K) of the one-round top-2 student.
 *
 * # Safety
 * Handles must be live; `buf` must be valid for `len` writes.
 */
SdStatus sd_pll_output(const SdCorruption *c,
                       const SdTheory *theory,
                       size_t true_label,
                       size_t given_label,
                       double *buf,
                       size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SELFDISTILL_H */
