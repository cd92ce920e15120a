#ifndef FRESH_H
#define FRESH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FreshScorer {
  FRESH_SCORER_ATTENTION = 0,
  FRESH_SCORER_GRADIENT = 1,
} FreshScorer;

typedef enum FreshStatus {
  FRESH_STATUS_OK = 0,
  FRESH_STATUS_NULL_POINTER = 1,
  FRESH_STATUS_INVALID_ARGUMENT = 2,
  FRESH_STATUS_BUFFER_TOO_SMALL = 3,
  FRESH_STATUS_IO = 4,
  FRESH_STATUS_PARSE = 5,
  FRESH_STATUS_SCHEMA = 6,
  FRESH_STATUS_SHAPE = 7,
  FRESH_STATUS_NUMERIC = 8,
  FRESH_STATUS_CONFIG = 9,
  FRESH_STATUS_INTERNAL = 10,
} FreshStatus;

typedef enum FreshStrategy {
  FRESH_STRATEGY_TOP_K = 0,
  FRESH_STRATEGY_CONTIGUOUS = 1,
} FreshStrategy;

/**
 * A loaded classifier and its vocabulary.
 */
typedef struct FreshClassifier FreshClassifier;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *fresh_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fresh_version(void);

/**
 * Rationale length for a document of `len` tokens at ratio `ratio`.
 *
 * # Safety
 * `out_k` must be a valid pointer.
 */
enum FreshStatus fresh_resolve_k(size_t len, double ratio, size_t *out_k);

/**
 * Start and mass of the highest-scoring window of `k` consecutive scores
 * (the first such window on ties).
 *
 * # Safety
 * `scores` must point to `len` readable doubles; the out pointers must be
 * valid.
 */
enum FreshStatus fresh_best_span(const double *scores,
                                 size_t len,
                                 size_t k,
                                 size_t *out_start,
                                 double *out_mass);

/**
 * Indices of the `k` highest scores in ascending index order (lower index
 * first on ties). `out_indices` must hold at least `k` entries.
 *
 * # Safety
 * `scores` must point to `len` readable doubles and `out_indices` to `k`
 * writable entries.
 */
enum FreshStatus fresh_topk(const double *scores, size_t len, size_t k, size_t *out_indices);

/**
 * Conciseness and contiguity penalty of a binary mask (`z[i]` nonzero
 * means selected).
 *
 * # Safety
 * `z` must point to `len` readable bytes and `out_value` must be valid.
 */
enum FreshStatus fresh_omega(const uint8_t *z,
                             size_t len,
                             double lambda1,
                             double lambda2,
                             double desired_ratio,
                             double *out_value);

/**
 * Expected maximum of `n` uniform draws with replacement from `scores`.
 *
 * # Safety
 * `scores` must point to `len` readable doubles and `out_value` must be
 * valid.
 */
enum FreshStatus fresh_expected_best(const double *scores,
                                     size_t len,
                                     uint64_t n,
                                     double *out_value);

/**
 * Load a classifier checkpoint and its `piece<TAB>id` vocabulary.
 *
 * # Safety
 * Both paths must be valid NUL-terminated strings and `out_handle` a valid
 * pointer. The handle must be released with [`fresh_classifier_free`].
 */
enum FreshStatus fresh_classifier_load(const char *checkpoint_path,
                                       const char *vocab_path,
                                       struct FreshClassifier **out_handle);

/**
 * Release a handle from [`fresh_classifier_load`]. NULL is ignored.
 *
 * # Safety
 * `handle` must be NULL or a live handle; it must not be used afterwards.
 */
void fresh_classifier_free(struct FreshClassifier *handle);

/**
 * Number of classes, or 0 for a NULL handle.
 *
 * # Safety
 * `handle` must be NULL or a live handle.
 */
size_t fresh_classifier_num_classes(const struct FreshClassifier *handle);

/**
 * Class probabilities for `doc_text` (whitespace-tokenized) with an
 * optional `query` (NULL for none), and the predicted label.
 *
 * # Safety
 * `handle` must be live, strings NUL-terminated, `out_probs` must hold
 * `capacity` doubles, and the remaining out pointers must be valid.
 */
enum FreshStatus fresh_classifier_predict(const struct FreshClassifier *handle,
                                          const char *doc_text,
                                          const char *query,
                                          double *out_probs,
                                          size_t capacity,
                                          size_t *out_len,
                                          size_t *out_label);

/**
 * One importance score per whitespace token of `doc_text`.
 *
 * # Safety
 * As for [`fresh_classifier_predict`], with `out_scores` holding
 * `capacity` doubles.
 */
enum FreshStatus fresh_classifier_token_scores(const struct FreshClassifier *handle,
                                               const char *doc_text,
                                               const char *query,
                                               enum FreshScorer scorer,
                                               double *out_scores,
                                               size_t capacity,
                                               size_t *out_len);

/**
 * Sorted token indices of the rationale for `doc_text` at length ratio
 * `ratio`, selected from the classifier's own scores.
 *
 * # Safety
 * As for [`fresh_classifier_predict`], with `out_indices` holding
 * `capacity` entries.
 */
enum FreshStatus fresh_classifier_rationale(const struct FreshClassifier *handle,
                                            const char *doc_text,
                                            const char *query,
                                            enum FreshScorer scorer,
                                            double ratio,
                                            enum FreshStrategy strategy,
                                            size_t *out_indices,
                                            size_t capacity,
                                            size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FRESH_H */
