#ifndef NON_H
#define NON_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NonStatus {
  NON_STATUS_OK = 0,
  NON_STATUS_NULL_POINTER = 1,
  NON_STATUS_INVALID_ARGUMENT = 2,
  NON_STATUS_IO = 3,
  NON_STATUS_PARSE = 4,
  NON_STATUS_SCHEMA_MISMATCH = 5,
  NON_STATUS_UNDEFINED_METRIC = 6,
  NON_STATUS_PANIC = 7,
  NON_STATUS_INTERNAL = 8,
} NonStatus;

// A loaded model.
typedef struct NonModel NonModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread. The pointer stays
// valid until the next failing call on the same thread.
const char *non_last_error(void);

// Library version as a static NUL-terminated string.
const char *non_version(void);

// Loads a checkpoint written by `non train` or `non search`. If
// `schema_hash` is not null the checkpoint must have been built for it.
//
// # Safety
// `path` and a non-null `schema_hash` must be NUL-terminated strings;
// `out` must be writable.
enum NonStatus non_model_load(const char *path, const char *schema_hash, struct NonModel **out);

// Releases a handle. Null is ignored.
//
// # Safety
// `handle` must come from [`non_model_load`] and not be used afterwards.
void non_model_free(struct NonModel *handle);

// Number of categorical fields; 0 for a null handle.
//
// # Safety
// `handle` must be null or a live handle.
size_t non_model_num_categorical(const struct NonModel *handle);

// Number of numerical fields; 0 for a null handle.
//
// # Safety
// `handle` must be null or a live handle.
size_t non_model_num_numerical(const struct NonModel *handle);

// Index range `[0, size)` of categorical field `field`, or 0 if out of
// range. Index 0 is the unknown bucket.
//
// # Safety
// `handle` must be null or a live handle.
size_t non_model_vocab_size(const struct NonModel *handle, size_t field);

// Positive-class probabilities for `rows` encoded rows. `categorical` holds
// `rows × num_categorical` indices and `numerical` holds
// `rows × num_numerical` normalized values, both row-major; either may be
// null when its count is zero. `out_probs` receives `rows` values.
//
// # Safety
// Buffers must hold the stated number of elements.
enum NonStatus non_model_predict(const struct NonModel *handle,
                                 const uint32_t *categorical,
                                 const double *numerical,
                                 size_t rows,
                                 double *out_probs);

// Rank-based AUC with ties counted one half. Fails with
// [`NonStatus::UndefinedMetric`] unless both classes occur.
//
// # Safety
// `scores` and `labels` must hold `n` values; `out` must be writable.
enum NonStatus non_auc(const double *scores, const double *labels, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NON_H */
