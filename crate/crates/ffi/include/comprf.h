#ifndef COMPRF_H
#define COMPRF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Largest render side accepted by [`comprf_model_render`].
 */
#define COMPRF_MAX_SIDE 1024

typedef enum ComprfStatus {
  COMPRF_STATUS_OK = 0,
  COMPRF_STATUS_NULL_POINTER = 1,
  COMPRF_STATUS_INVALID_ARGUMENT = 2,
  COMPRF_STATUS_CONFIG = 3,
  COMPRF_STATUS_NUMERIC = 4,
  COMPRF_STATUS_IO = 5,
  COMPRF_STATUS_FORMAT = 6,
  COMPRF_STATUS_BUFFER_TOO_SMALL = 7,
  COMPRF_STATUS_PANIC = 8,
} ComprfStatus;

/**
 * Opaque loaded model.
 */
typedef struct ComprfModel ComprfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *comprf_last_error(void);

/**
 * Loads the part models trained in `workdir`. `config` is a TOML path
 * relative to `workdir`, or null for the defaults. `baseline` selects the
 * independently trained parts. On success `*out` owns a handle that must be
 * released with [`comprf_model_free`].
 *
 * # Safety
 * `workdir` and a non-null `config` must be NUL-terminated strings; `out`
 * must be valid for writes.
 */
enum ComprfStatus comprf_model_open(const char *workdir,
                                    const char *config,
                                    bool baseline,
                                    struct ComprfModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`comprf_model_open`] and not be used afterwards.
 */
void comprf_model_free(struct ComprfModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` valid for writes.
 */
enum ComprfStatus comprf_model_part_count(const struct ComprfModel *model, size_t *out);

/**
 * # Safety
 * `model` must be a live handle and `out` valid for writes.
 */
enum ComprfStatus comprf_model_latent_dim(const struct ComprfModel *model, size_t *out);

/**
 * Copies part `index`'s name, NUL-terminated, into `buf`. `*needed`
 * receives the size including the terminator even when `buf` is too small.
 *
 * # Safety
 * `buf` must be valid for `len` bytes (or null with `len` 0) and `needed`
 * valid for writes.
 */
enum ComprfStatus comprf_model_part_name(const struct ComprfModel *model,
                                         size_t index,
                                         char *buf,
                                         size_t len,
                                         size_t *needed);

/**
 * Samples one latent per part from `seed` into `out` (part-major,
 * `part_count * latent_dim` values). `tied` shares the noise vector across
 * parts.
 *
 * # Safety
 * `out` must be valid for `len` writes.
 */
enum ComprfStatus comprf_model_sample_latents(const struct ComprfModel *model,
                                              uint64_t seed,
                                              bool tied,
                                              double *out,
                                              size_t len);

/**
 * Renders `latents` (as written by [`comprf_model_sample_latents`]) at the
 * given pose into `rgb`, `side * side * 3` bytes, row-major. `whiteout` is
 * the part kept in color with the others painted white, or -1 for a plain
 * composite.
 *
 * # Safety
 * `latents` must be valid for `latents_len` reads and `rgb` for `rgb_len`
 * writes.
 */
enum ComprfStatus comprf_model_render(const struct ComprfModel *model,
                                      const double *latents,
                                      size_t latents_len,
                                      double azimuth,
                                      double elevation,
                                      size_t side,
                                      bool use_blend,
                                      int32_t whiteout,
                                      uint8_t *rgb,
                                      size_t rgb_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COMPRF_H */
