/* C interface to the specvox backbone and retrieval index. */

#ifndef SPECVOX_H
#define SPECVOX_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Anything but OK also records a message
 * retrievable with `specvox_last_error_message`.
 */
typedef enum SpecvoxStatus {
  SPECVOX_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  SPECVOX_STATUS_NULL_ARGUMENT = 1,
  /**
   * An argument failed validation: wrong length, bad UTF-8, k = 0.
   */
  SPECVOX_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A model configuration could not be parsed or validated.
   */
  SPECVOX_STATUS_BAD_CONFIG = 3,
  /**
   * Files were missing, unreadable, or malformed.
   */
  SPECVOX_STATUS_DATA_ERROR = 4,
} SpecvoxStatus;

/**
 * An exact cosine-similarity index over named rows. Create with
 * `specvox_index_open`, destroy with `specvox_index_free`.
 */
typedef struct SpecvoxIndex SpecvoxIndex;

/**
 * A loaded embedding model. Create with `specvox_model_load` or
 * `specvox_model_from_config_json`, destroy with `specvox_model_free`.
 */
typedef struct SpecvoxModel SpecvoxModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Crate version as a static NUL-terminated string; never freed.
 */
const char *specvox_version(void);

/**
 * Message from the most recent failing call on this thread, or an empty
 * string if nothing failed yet. The pointer stays valid until the next
 * failing call on the same thread.
 */
const char *specvox_last_error_message(void);

/**
 * Loads a trained model from a checkpoint directory and writes the new
 * handle to `out`.
 *
 * # Safety
 * `dir` must be a NUL-terminated path and `out` a valid pointer; the handle
 * written to `out` must eventually go to `specvox_model_free`.
 */
enum SpecvoxStatus specvox_model_load(const char *dir, struct SpecvoxModel **out);

/**
 * Builds a freshly initialized (untrained) model from a JSON configuration
 * string and writes the new handle to `out`.
 *
 * # Safety
 * Same contract as `specvox_model_load`.
 */
enum SpecvoxStatus specvox_model_from_config_json(const char *config_json,
                                                  uint64_t seed,
                                                  struct SpecvoxModel **out);

/**
 * Frees a model handle; null is a no-op.
 *
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void specvox_model_free(struct SpecvoxModel *model);

/**
 * Voxel vector length the model expects; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle from this library.
 */
uintptr_t specvox_model_input_len(const struct SpecvoxModel *model);

/**
 * Flattened embedding length the model produces; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle from this library.
 */
uintptr_t specvox_model_output_len(const struct SpecvoxModel *model);

/**
 * Number of learnable parameters; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle from this library.
 */
uintptr_t specvox_model_param_count(const struct SpecvoxModel *model);

/**
 * Embeds one voxel vector. `voxels` must hold `specvox_model_input_len`
 * floats and `out` must have room for `specvox_model_output_len`.
 *
 * # Safety
 * `model` must be a live handle; `voxels` and `out` must point to arrays of
 * at least `voxel_len` and `out_len` floats.
 */
enum SpecvoxStatus specvox_model_embed(const struct SpecvoxModel *model,
                                       const float *voxels,
                                       uintptr_t voxel_len,
                                       float *out,
                                       uintptr_t out_len);

/**
 * Opens an index snapshot directory and writes the new handle to `out`.
 *
 * # Safety
 * `dir` must be a NUL-terminated path and `out` a valid pointer; the handle
 * written to `out` must eventually go to `specvox_index_free`.
 */
enum SpecvoxStatus specvox_index_open(const char *dir, struct SpecvoxIndex **out);

/**
 * Frees an index handle; null is a no-op.
 *
 * # Safety
 * `index` must be null or a handle from this library not yet freed.
 */
void specvox_index_free(struct SpecvoxIndex *index);

/**
 * Number of indexed items; 0 for a null handle.
 *
 * # Safety
 * `index` must be null or a live handle from this library.
 */
uintptr_t specvox_index_len(const struct SpecvoxIndex *index);

/**
 * Row width of the index; 0 for a null handle.
 *
 * # Safety
 * `index` must be null or a live handle from this library.
 */
uintptr_t specvox_index_dim(const struct SpecvoxIndex *index);

/**
 * Id of the item at `position`, or null when out of range. The string is
 * borrowed from the handle and stays valid until `specvox_index_free`.
 *
 * # Safety
 * `index` must be null or a live handle from this library.
 */
const char *specvox_index_id(const struct SpecvoxIndex *index, uintptr_t position);

/**
 * Exact top-k cosine search. Writes up to `k` item positions and scores,
 * best first, and stores the number written in `out_count` (less than `k`
 * only when the index holds fewer items).
 *
 * # Safety
 * `index` must be a live handle; `query` must point to `query_len` floats;
 * `out_positions` and `out_scores` must have room for `k` entries each;
 * `out_count` must be a valid pointer.
 */
enum SpecvoxStatus specvox_index_search(const struct SpecvoxIndex *index,
                                        const float *query,
                                        uintptr_t query_len,
                                        uintptr_t k,
                                        uintptr_t *out_positions,
                                        double *out_scores,
                                        uintptr_t *out_count);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* SPECVOX_H */
