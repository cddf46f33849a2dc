#ifndef UGPRESS_H
#define UGPRESS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum UgStatus {
  UG_STATUS_OK = 0,
  UG_STATUS_NULL_ARGUMENT = 1,
  UG_STATUS_INVALID_ARGUMENT = 2,
  UG_STATUS_IO = 3,
  UG_STATUS_FORMAT = 4,
  /**
   * Cache and model use different precisions.
   */
  UG_STATUS_MISMATCH = 5,
  UG_STATUS_FAILED = 6,
  UG_STATUS_PANIC = 7,
} UgStatus;

/**
 * Compressed context for one model.
 */
typedef struct UgCache UgCache;

/**
 * A loaded checkpoint.
 */
typedef struct UgModel UgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer stays valid until
 * the next call into this library from the same thread.
 */
const char *ug_last_error(void);

/**
 * Loads a checkpoint in the precision recorded in its header.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum UgStatus ug_model_load(const char *path, struct UgModel **out);

/**
 * # Safety
 * `model` must come from [`ug_model_load`] and not be used afterwards. Null is ignored.
 */
void ug_model_free(struct UgModel *model);

/**
 * Window size (tokens per compressed segment), or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
size_t ug_model_window(const struct UgModel *model);

/**
 * Creates an empty cache matching `model`.
 *
 * # Safety
 * `model` must be a live model handle and `out` a writable pointer.
 */
enum UgStatus ug_cache_new(const struct UgModel *model, struct UgCache **out);

/**
 * Loads a cache file, converting it to the model's precision.
 *
 * # Safety
 * `model` must be a live model handle, `path` a NUL-terminated string, `out` writable.
 */
enum UgStatus ug_cache_load(const struct UgModel *model, const char *path, struct UgCache **out);

/**
 * # Safety
 * `cache` must be a live cache handle and `path` a NUL-terminated string.
 */
enum UgStatus ug_cache_save(const struct UgCache *cache, const char *path);

/**
 * # Safety
 * `cache` must come from this library and not be used afterwards. Null is ignored.
 */
void ug_cache_free(struct UgCache *cache);

/**
 * Number of cached compression-token entries, or 0 for a null handle.
 *
 * # Safety
 * `cache` must be null or a live cache handle.
 */
size_t ug_cache_len(const struct UgCache *cache);

/**
 * Number of source tokens compressed so far, or 0 for a null handle.
 *
 * # Safety
 * `cache` must be null or a live cache handle.
 */
size_t ug_cache_source_tokens(const struct UgCache *cache);

/**
 * Compresses `tokens` window by window at `ratio` and appends the result to `cache`.
 * On failure the windows compressed before the error stay in the cache.
 *
 * # Safety
 * Handles must be live; `tokens` must point to `len` readable values.
 */
enum UgStatus ug_compress(const struct UgModel *model,
                          struct UgCache *cache,
                          const uint32_t *tokens,
                          size_t len,
                          uint32_t ratio);

/**
 * Mean negative log-likelihood (nats) of `tokens` as a continuation of the cached context.
 * Windows filled while scoring are compressed at `ratio`; `cache` itself is not modified.
 *
 * # Safety
 * Handles must be live; `tokens` must point to `len` readable values; `mean_nll` writable.
 */
enum UgStatus ug_score(const struct UgModel *model,
                       const struct UgCache *cache,
                       const uint32_t *tokens,
                       size_t len,
                       uint32_t ratio,
                       double *mean_nll);

/**
 * Greedy continuation of `prompt` after the cached context. Writes `max_new` tokens to
 * `out`, which must have room for that many.
 *
 * # Safety
 * Handles must be live; `prompt` must point to `prompt_len` values and `out` to `max_new`
 * writable values.
 */
enum UgStatus ug_generate(const struct UgModel *model,
                          const struct UgCache *cache,
                          const uint32_t *prompt,
                          size_t prompt_len,
                          size_t max_new,
                          uint32_t ratio,
                          uint32_t *out);

/**
 * Precision tag of a model handle: 32, 64, or 0 for null.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
uint32_t ug_model_precision(const struct UgModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UGPRESS_H */
