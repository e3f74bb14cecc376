#ifndef MPA_H
#define MPA_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum MpaStatus {
  MPA_STATUS_OK = 0,
  /**
   * A required pointer was null.
   */
  MPA_STATUS_NULL_ARGUMENT = 1,
  /**
   * Invalid argument, configuration or shape.
   */
  MPA_STATUS_USAGE = 2,
  /**
   * Malformed file, container or stream.
   */
  MPA_STATUS_FORMAT = 3,
  /**
   * Numeric failure or violated internal invariant.
   */
  MPA_STATUS_NUMERIC = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  MPA_STATUS_PANIC = 5,
} MpaStatus;

/**
 * Decoder-side task selector.
 */
typedef enum MpaTask {
  MPA_TASK_MSE = 0,
  MPA_TASK_CLS = 1,
  MPA_TASK_SEG = 2,
} MpaTask;

/**
 * Opaque model handle.
 */
typedef struct MpaModel MpaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint file. On success `*out` owns a handle to release with
 * [`mpa_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MpaStatus mpa_model_load(const char *path, struct MpaModel **out);

/**
 * Loads a checkpoint from memory.
 *
 * # Safety
 * `data` must point to `len` readable bytes and `out` be a valid pointer.
 */
enum MpaStatus mpa_model_load_bytes(const uint8_t *data, size_t len, struct MpaModel **out);

/**
 * Releases a handle from [`mpa_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void mpa_model_free(struct MpaModel *model);

/**
 * Number of quality levels of the model (the upper bound of `q`), or 0
 * for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t mpa_model_levels(const struct MpaModel *model);

/**
 * Compresses an interleaved 8-bit RGB image at quality `q`. The stream is
 * returned in `*out`/`*out_len` and must be released with [`mpa_bytes_free`].
 *
 * # Safety
 * `rgb` must point to `width·height·3` bytes; out pointers must be valid.
 */
enum MpaStatus mpa_encode(const struct MpaModel *model,
                          const uint8_t *rgb,
                          uint32_t width,
                          uint32_t height,
                          double q,
                          uint8_t **out,
                          size_t *out_len);

/**
 * Decodes a stream at task orientation `alpha ∈ [0, 1]` towards `task`.
 * The RGB result (`*width·*height·3` bytes) must be released with
 * [`mpa_bytes_free`].
 *
 * # Safety
 * `stream` must point to `len` bytes; out pointers must be valid.
 */
enum MpaStatus mpa_decode(const struct MpaModel *model,
                          const uint8_t *stream,
                          size_t len,
                          double alpha,
                          enum MpaTask task,
                          uint8_t **rgb_out,
                          uint32_t *width,
                          uint32_t *height);

/**
 * Releases a buffer returned by [`mpa_encode`] or [`mpa_decode`].
 *
 * # Safety
 * `data`/`len` must be exactly a pair returned by this library, or null.
 */
void mpa_bytes_free(uint8_t *data, size_t len);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library from the same thread.
 */
const char *mpa_last_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MPA_H */
