#ifndef IKTN_H
#define IKTN_H

/* Generated by cbindgen from the iktn-ffi sources. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum IktnStatus {
  IKTN_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  IKTN_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8 or not valid request JSON.
   */
  IKTN_STATUS_INVALID_ARGUMENT = 2,
  IKTN_STATUS_CONFIG = 3,
  /**
   * Malformed corpus, prediction file or tag.
   */
  IKTN_STATUS_FORMAT = 4,
  IKTN_STATUS_CHECKPOINT = 5,
  IKTN_STATUS_IO = 6,
  IKTN_STATUS_NUMERICAL = 7,
  /**
   * Shape, index or precondition failure inside the library.
   */
  IKTN_STATUS_INTERNAL = 8,
  IKTN_STATUS_PANIC = 9,
} IktnStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct IktnModel IktnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint. On success `*out` receives a handle to release with
 * [`iktn_model_free`].
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` valid for one pointer
 * write.
 */
enum IktnStatus iktn_model_load(const char *path, struct IktnModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `m` must be null or a handle from [`iktn_model_load`] not yet freed.
 */
void iktn_model_free(struct IktnModel *m);

/**
 * Predicts spans and sentiments for one sentence given as request JSON.
 * `*out` receives one prediction object.
 *
 * # Safety
 * `m` must be a live handle, `request` a nul-terminated string and `out`
 * valid for one pointer write.
 */
enum IktnStatus iktn_predict_json(const struct IktnModel *m, const char *request, char **out);

/**
 * Scores the model on a labelled corpus file. `adjacency` may be null.
 * `*out` receives the evaluation report.
 *
 * # Safety
 * `m` must be a live handle, `corpus` a nul-terminated string, `adjacency`
 * null or a nul-terminated string, and `out` valid for one pointer write.
 */
enum IktnStatus iktn_evaluate_json(const struct IktnModel *m,
                                   const char *corpus,
                                   const char *adjacency,
                                   char **out);

/**
 * Coupling coefficients of one routing direction (`"ate->ote"` and the
 * like) for one sentence. `*out` receives an array of trace records.
 *
 * # Safety
 * `m` must be a live handle, `request` and `direction` nul-terminated
 * strings, and `out` valid for one pointer write.
 */
enum IktnStatus iktn_trace_json(const struct IktnModel *m,
                                const char *request,
                                const char *direction,
                                char **out);

/**
 * Tensor names and shapes of the model, as `[[name, [dims...]], ...]`.
 *
 * # Safety
 * `m` must be a live handle and `out` valid for one pointer write.
 */
enum IktnStatus iktn_manifest_json(const struct IktnModel *m, char **out);

/**
 * Message of the last failure on this thread, or null after a success.
 * Valid until the next call into this library on the same thread.
 */
const char *iktn_last_error(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void iktn_string_free(char *s);

/**
 * Library version, statically allocated.
 */
const char *iktn_version(void);

/**
 * Checkpoint container version this build reads and writes.
 */
uint32_t iktn_checkpoint_format_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IKTN_H */
