#ifndef INSEGAN_H
#define INSEGAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes for every fallible entry point.
 */
typedef enum InseganStatus {
  InseganOk = 0,
  /**
   * A required pointer argument was null.
   */
  InseganNullArgument = 1,
  /**
   * An argument had the wrong size or an invalid value.
   */
  InseganInvalidArgument = 2,
  /**
   * The checkpoint could not be read or parsed.
   */
  InseganBadCheckpoint = 3,
  /**
   * An internal failure; see `insegan_last_error`.
   */
  InseganInternal = 4,
} InseganStatus;

/**
 * Opaque handle to a loaded model (generator + encoder weights).
 */
typedef struct InseganModel InseganModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the most recent error message for this thread into `buf` (always
 * NUL-terminated, truncated to `cap`). Returns the full message length in
 * bytes, excluding the terminator; call with `cap == 0` to query the size.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes, or be null with `cap == 0`.
 */
size_t insegan_last_error(char *buf, size_t cap);

/**
 * Loads a trained checkpoint file and returns a model handle through `out`.
 * The handle must be released with [`insegan_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` must be a valid
 * pointer to a model-handle slot.
 */
enum InseganStatus insegan_model_load(const char *path, struct InseganModel **out);

/**
 * Releases a model handle. A null handle is a no-op.
 *
 * # Safety
 * `model` must be a handle from [`insegan_model_load`], released only once.
 */
void insegan_model_free(struct InseganModel *model);

/**
 * Side length of the square depth images the model consumes and of the masks
 * it emits. Returns 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle from [`insegan_model_load`].
 */
uint32_t insegan_model_image_size(const struct InseganModel *model);

/**
 * Number of object instances the model separates. Returns 0 for a null
 * handle.
 *
 * # Safety
 * `model` must be null or a live handle from [`insegan_model_load`].
 */
uint32_t insegan_model_instance_count(const struct InseganModel *model);

/**
 * Segments one normalized depth image (row-major `side * side` floats) into
 * a per-pixel label mask: 0 is background, labels `1..=instance_count`
 * identify instances. Pixels whose reconstructed depth is at or below `tau`
 * become background; connected components smaller than `min_area` pixels are
 * suppressed (pass 0 to keep everything).
 *
 * # Safety
 * `depth` must point to `depth_len` readable floats and `mask_out` to
 * `mask_len` writable bytes; both lengths must equal `side * side`.
 */
enum InseganStatus insegan_segment(const struct InseganModel *model,
                                   const float *depth,
                                   size_t depth_len,
                                   float tau,
                                   size_t min_area,
                                   uint8_t *mask_out,
                                   size_t mask_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* INSEGAN_H */
