#ifndef SUPERPR_H
#define SUPERPR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum SuperprStatus {
  SUPERPR_STATUS_OK = 0,
  SUPERPR_STATUS_NULL_POINTER = 1,
  SUPERPR_STATUS_INVALID_ARGUMENT = 2,
  SUPERPR_STATUS_SHAPE = 3,
  SUPERPR_STATUS_CONFIG = 4,
  SUPERPR_STATUS_IO = 5,
  SUPERPR_STATUS_FORMAT = 6,
  SUPERPR_STATUS_RUNTIME = 7,
  SUPERPR_STATUS_BUFFER_TOO_SMALL = 8,
  SUPERPR_STATUS_PANIC = 9,
} SuperprStatus;

/**
 * Opaque model handle; create with [`superpr_model_new`] or
 * [`superpr_model_load`], release with [`superpr_model_free`].
 */
typedef struct SuperprModel SuperprModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *superpr_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *superpr_version(void);

/**
 * Builds a model from a JSON model spec and an initialization seed.
 *
 * # Safety
 * `spec_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SuperprStatus superpr_model_new(const char *spec_json,
                                     uint64_t seed,
                                     struct SuperprModel **out);

/**
 * Loads a checkpoint directory written by `superpr train` or
 * [`superpr_model_save`].
 *
 * # Safety
 * `dir` must be a NUL-terminated path and `out` a valid pointer.
 */
enum SuperprStatus superpr_model_load(const char *dir, struct SuperprModel **out);

/**
 * # Safety
 * `model` must come from this library; `dir` must be a NUL-terminated path.
 */
enum SuperprStatus superpr_model_save(const struct SuperprModel *model, const char *dir);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void superpr_model_free(struct SuperprModel *model);

/**
 * Number of scalar parameters.
 *
 * # Safety
 * `model` must come from this library and `out` must be valid.
 */
enum SuperprStatus superpr_model_param_count(const struct SuperprModel *model, uint64_t *out);

/**
 * Runs the model on `input` and writes the `[B, 1, H, W]` output (logits
 * or the restored image, depending on the head).
 *
 * # Safety
 * `input` must hold the product of `shape` floats; `out` must hold
 * `out_len` floats.
 */
enum SuperprStatus superpr_model_forward(const struct SuperprModel *model,
                                         const float *input,
                                         const size_t *shape,
                                         float *out,
                                         size_t out_len);

/**
 * One-level orthonormal Haar analysis. The output has shape
 * `[B, 4C, H/2, W/2]` with bands LL, LH, HL, HH stacked in that order, and
 * the same element count as the input.
 *
 * # Safety
 * `input` must hold the product of `shape` floats; `out` must hold
 * `out_len` floats.
 */
enum SuperprStatus superpr_dwt(const float *input, const size_t *shape, float *out, size_t out_len);

/**
 * Inverse of [`superpr_dwt`]; `shape` is the stacked `[B, 4C, H, W]` shape.
 *
 * # Safety
 * As for [`superpr_dwt`].
 */
enum SuperprStatus superpr_idwt(const float *input,
                                const size_t *shape,
                                float *out,
                                size_t out_len);

/**
 * Max-abs residual of `idwt(dwt(x))` against `x`.
 *
 * # Safety
 * `input` must hold the product of `shape` floats; `residual` must be valid.
 */
enum SuperprStatus superpr_verify_pr(const float *input, const size_t *shape, double *residual);

/**
 * Per-layer MAC table for a JSON model spec at the given input shape, as a
 * newly allocated CSV string to be released with [`superpr_string_free`].
 *
 * # Safety
 * `spec_json` must be NUL-terminated; `shape` must point to four values;
 * `out` must be valid.
 */
enum SuperprStatus superpr_macs_csv(const char *spec_json, const size_t *shape, char **out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void superpr_string_free(char *s);

/**
 * Reads a tensor file. `shape_out` always receives the stored shape; the
 * data is converted to `float` and written to `out` when it is non-null.
 * Call once with a null `out` to size the buffer.
 *
 * # Safety
 * `path` must be NUL-terminated; `shape_out` must hold four values; `out`
 * must be null or hold `out_len` floats.
 */
enum SuperprStatus superpr_tensor_read(const char *path,
                                       size_t *shape_out,
                                       float *out,
                                       size_t out_len);

/**
 * Writes a `float` tensor file.
 *
 * # Safety
 * `path` must be NUL-terminated; `data` must hold the product of `shape`
 * floats.
 */
enum SuperprStatus superpr_tensor_write(const char *path, const float *data, const size_t *shape);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SUPERPR_H */
