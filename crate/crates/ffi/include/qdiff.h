#ifndef QDIFF_H
#define QDIFF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum QdiffStatus {
  QDIFF_STATUS_OK = 0,
  QDIFF_STATUS_NULL_POINTER = 1,
  QDIFF_STATUS_INVALID_ARGUMENT = 2,
  QDIFF_STATUS_SHAPE = 3,
  QDIFF_STATUS_CONFIG = 4,
  QDIFF_STATUS_CHECKPOINT = 5,
  QDIFF_STATUS_IO = 6,
  QDIFF_STATUS_NUMERICAL = 7,
  QDIFF_STATUS_MISSING_QUANT_PARAMS = 8,
  QDIFF_STATUS_INTERNAL = 9,
} QdiffStatus;

typedef enum QdiffFormat {
  QDIFF_FORMAT_FP32 = 0,
  QDIFF_FORMAT_BF16 = 1,
  QDIFF_FORMAT_INT8 = 2,
} QdiffFormat;

/**
 * Teacher (FP32/BF16 steps), optional INT8 student, and the noise schedule.
 */
typedef struct QdiffModel QdiffModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or an empty string. The
 * pointer stays valid until the next failing call on this thread.
 */
const char *qdiff_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *qdiff_version(void);

/**
 * Loads a teacher checkpoint and, if `student_path` is not NULL, an INT8
 * student. `threads == 0` uses every logical core. The default noise
 * schedule is used for sampling.
 *
 * # Safety
 * Path arguments must be NULL or NUL-terminated; `out` must be writable.
 */
enum QdiffStatus qdiff_model_load(const char *teacher_path,
                                  const char *student_path,
                                  size_t threads,
                                  struct QdiffModel **out);

/**
 * Releases a handle from [`qdiff_model_load`]. NULL is ignored.
 *
 * # Safety
 * `model` must be NULL or a live handle, and is invalid afterwards.
 */
void qdiff_model_free(struct QdiffModel *model);

/**
 * Writes the `[C, H, W]` image shape the model generates.
 *
 * # Safety
 * `model` must be a live handle; `out` must point to 3 writable values.
 */
enum QdiffStatus qdiff_model_image_shape(const struct QdiffModel *model, size_t *out);

/**
 * Generates `count` images over `steps` denoising steps, running the first
 * and last `boundary` steps in `high` and the rest in `low`. Writes
 * `count * C * H * W` values to `out` (`out_len` must match).
 *
 * # Safety
 * `model` must be a live handle; `out` must point to `out_len` writable floats.
 */
enum QdiffStatus qdiff_sample(const struct QdiffModel *model,
                              size_t steps,
                              size_t boundary,
                              enum QdiffFormat high,
                              enum QdiffFormat low,
                              size_t count,
                              uint64_t seed,
                              float *out,
                              size_t out_len);

/**
 * Format used at loop step `i` (0 = noisiest) of an `n`-step run.
 *
 * # Safety
 * `out` must be writable.
 */
enum QdiffStatus qdiff_precision_for_step(size_t n,
                                          size_t k,
                                          size_t i,
                                          enum QdiffFormat high,
                                          enum QdiffFormat low,
                                          enum QdiffFormat *out);

/**
 * Channel-parallel GroupNorm of an `[n, c, h, w]` tensor. `gamma` and
 * `beta` may be NULL (identity affine); otherwise they hold `c` values.
 *
 * # Safety
 * `x` and `out` must point to `n*c*h*w` floats; non-NULL `gamma`/`beta` to `c`.
 */
enum QdiffStatus qdiff_groupnorm(const float *x,
                                 size_t n,
                                 size_t c,
                                 size_t h,
                                 size_t w,
                                 size_t groups,
                                 float eps,
                                 const float *gamma,
                                 const float *beta,
                                 size_t threads,
                                 float *out);

/**
 * Fréchet distance between two Gaussians given means (`dim`) and row-major
 * covariances (`dim * dim`).
 *
 * # Safety
 * Means must point to `dim` doubles, covariances to `dim*dim`; `out` writable.
 */
enum QdiffStatus qdiff_frechet_distance(const double *mean_a,
                                        const double *cov_a,
                                        const double *mean_b,
                                        const double *cov_b,
                                        size_t dim,
                                        double *out);

/**
 * Rounds `len` floats to the nearest bfloat16 (ties to even). `input` and
 * `out` may be the same buffer.
 *
 * # Safety
 * Both pointers must cover `len` floats.
 */
enum QdiffStatus qdiff_bf16_round(const float *input, float *out, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QDIFF_H */
