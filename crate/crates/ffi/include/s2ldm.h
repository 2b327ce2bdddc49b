#ifndef S2LDM_H
#define S2LDM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum S2Status {
  S2_STATUS_OK = 0,
  S2_STATUS_NULL_POINTER = 1,
  S2_STATUS_INVALID_ARGUMENT = 2,
  S2_STATUS_CORRUPT_CHECKPOINT = 3,
  S2_STATUS_UNSUPPORTED_VERSION = 4,
  S2_STATUS_IO = 5,
  S2_STATUS_DIVERGENCE = 6,
  S2_STATUS_UNDEFINED_METRIC = 7,
  S2_STATUS_CONFIG = 8,
  S2_STATUS_PANIC = 9,
} S2Status;

/**
 * A loaded autoencoder and denoiser pair.
 */
typedef struct S2Model S2Model;

/**
 * Averaged image metrics.
 */
typedef struct S2Metrics {
  double nmae;
  double nmse;
  double psnr_db;
  /**
   * 1 when every prediction matched its target exactly.
   */
  int32_t psnr_exact;
  double ssim;
} S2Metrics;

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *s2ldm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *s2ldm_version(void);

/**
 * Loads an autoencoder checkpoint and a matching diffusion checkpoint.
 *
 * # Safety
 * Paths must be valid NUL-terminated strings; `out` must be writable.
 */
enum S2Status s2ldm_model_load(const char *ae_path, const char *diff_path, struct S2Model **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`s2ldm_model_load`] and not be used afterwards.
 */
void s2ldm_model_free(struct S2Model *model);

/**
 * Default reverse-process start stored in the diffusion checkpoint.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum S2Status s2ldm_model_default_t_start(const struct S2Model *model, size_t *out);

/**
 * Translates one non-contrast image. `t_start < 0` uses the checkpoint
 * default; 0 decodes the quantized latent directly.
 *
 * # Safety
 * `input` and `output` must each hold `height * width` doubles.
 */
enum S2Status s2ldm_translate(const struct S2Model *model,
                              const double *input,
                              size_t height,
                              size_t width,
                              int64_t t_start,
                              uint64_t seed,
                              double *output);

/**
 * NMAE, NMSE, PSNR (data range 2) and SSIM of one image pair.
 *
 * # Safety
 * `pred` and `target` must each hold `height * width` doubles; `out` must
 * be writable.
 */
enum S2Status s2ldm_metrics(const double *pred,
                            const double *target,
                            size_t height,
                            size_t width,
                            struct S2Metrics *out);

/**
 * Generates one windowed phantom pair of `size x size` pixels. `mask` may
 * be null; otherwise it receives 1 inside contrast regions and 0 elsewhere.
 *
 * # Safety
 * `ncct` and `cect` must hold `size * size` doubles, `mask` (if non-null)
 * `size * size` bytes.
 */
enum S2Status s2ldm_phantom_pair(uint64_t seed,
                                 size_t size,
                                 double *ncct,
                                 double *cect,
                                 uint8_t *mask);

#endif  /* S2LDM_H */
