/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef TAILOR_H
#define TAILOR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TailorDegradationMode {
  TAILOR_DEGRADATION_MODE_DYNAMIC = 0,
  TAILOR_DEGRADATION_MODE_FIXED = 1,
  TAILOR_DEGRADATION_MODE_LINEAR_ASCENT = 2,
  TAILOR_DEGRADATION_MODE_LINEAR_DESCENT = 3,
  TAILOR_DEGRADATION_MODE_OFF = 4,
  TAILOR_DEGRADATION_MODE_MASK_OUT = 5,
} TailorDegradationMode;

typedef enum TailorReduction {
  TAILOR_REDUCTION_FULL_GRID = 0,
  TAILOR_REDUCTION_MASK_AREA = 1,
} TailorReduction;

typedef enum TailorStatus {
  TAILOR_STATUS_OK = 0,
  TAILOR_STATUS_NULL_POINTER = 1,
  TAILOR_STATUS_INVALID_ARGUMENT = 2,
  TAILOR_STATUS_CONFIG = 3,
  TAILOR_STATUS_IO = 4,
  TAILOR_STATUS_BACKEND_UNAVAILABLE = 5,
  TAILOR_STATUS_CHECKPOINT = 6,
  TAILOR_STATUS_RUNTIME = 7,
  TAILOR_STATUS_PANIC = 8,
} TailorStatus;

/**
 * A resolved run configuration with its pair, plus the trace once trained.
 */
typedef struct TailorRun TailorRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static nul-terminated string.
 */
const char *tailor_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next library call on the same thread.
 */
const char *tailor_last_error(void);

/**
 * Frees a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void tailor_string_free(char *s);

/**
 * Default schedule length for the given stage lengths.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum TailorStatus tailor_schedule_length(size_t warmup_steps, size_t dsbal_steps, size_t *out);

/**
 * Degradation intensity at step `d` of a schedule. `mode` is a
 * `TailorDegradationMode` value.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum TailorStatus tailor_schedule_intensity(int32_t mode,
                                            double alpha_init,
                                            double gamma,
                                            double fixed_alpha,
                                            size_t total_steps,
                                            int64_t d,
                                            double *out);

/**
 * Noise seed of image `image` of sample `sample` at step `step`.
 */
uint64_t tailor_noise_seed(uint64_t global_seed, size_t step, size_t sample, size_t image);

/**
 * Adds `alpha` times seeded Gaussian noise outside the mask. `image` and
 * `out` hold `channels * height * width` values; they may alias.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum TailorStatus tailor_degrade(const double *image,
                                 const uint8_t *mask,
                                 size_t channels,
                                 size_t height,
                                 size_t width,
                                 double alpha,
                                 uint64_t seed,
                                 double *out);

/**
 * Masked squared error between `target` and `pred` (`channels * height * width`).
 * `reduction` is a `TailorReduction` value.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum TailorStatus tailor_masked_diffusion_loss(const double *target,
                                               const double *pred,
                                               const uint8_t *mask,
                                               size_t channels,
                                               size_t height,
                                               size_t width,
                                               int32_t reduction,
                                               double *out);

/**
 * Cross-attention loss of a normalized `height * width` map against a mask.
 *
 * # Safety
 * Pointers must be valid for the stated lengths.
 */
enum TailorStatus tailor_cross_attention_loss(const double *attn,
                                              const uint8_t *mask,
                                              size_t height,
                                              size_t width,
                                              double *out);

/**
 * Largest of `n` per-sample losses. `index` receives the 1-based sample;
 * ties go to the smallest index.
 *
 * # Safety
 * `losses` must hold `n` values; `index` and `value` must be valid pointers.
 */
enum TailorStatus tailor_diff_max(const double *losses, size_t n, size_t *index, double *value);

/**
 * Renders an evaluation prompt template with `"<first> with <second>"`.
 * The result is freed with [`tailor_string_free`].
 *
 * # Safety
 * Strings must be nul-terminated; `out` must be a valid pointer.
 */
enum TailorStatus tailor_render_prompt(const char *template_,
                                       const char *first,
                                       const char *second,
                                       char **out);

/**
 * Resolves a run: optional YAML config file plus `n` dotted `keys[i] = values[i]`
 * overrides. On success `*out` owns a handle.
 *
 * # Safety
 * `config_path` may be null; `keys` and `values` must hold `n` strings.
 */
enum TailorStatus tailor_run_open(const char *config_path,
                                  const char *const *keys,
                                  const char *const *values,
                                  size_t n,
                                  struct TailorRun **out);

/**
 * Hex config hash of the run. Freed with [`tailor_string_free`].
 *
 * # Safety
 * `run` must be a live handle; `out` a valid pointer.
 */
enum TailorStatus tailor_run_config_hash(const struct TailorRun *run, char **out);

/**
 * Trains the run and writes its run directory, whose path goes to `out`
 * (freed with [`tailor_string_free`]).
 *
 * # Safety
 * `run` must be a live handle; `out` a valid pointer.
 */
enum TailorStatus tailor_run_train(struct TailorRun *run, char **out);

/**
 * Copies up to `capacity` per-step total losses of the last training into
 * `buf`; `len` receives the full trace length.
 *
 * # Safety
 * `run` must be a live handle; `buf` valid for `capacity` values; `len` valid.
 */
enum TailorStatus tailor_run_loss_trace(const struct TailorRun *run,
                                        double *buf,
                                        size_t capacity,
                                        size_t *len);

/**
 * Releases a run handle. Null is ignored.
 *
 * # Safety
 * `run` must come from [`tailor_run_open`] and not have been freed.
 */
void tailor_run_free(struct TailorRun *run);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* TAILOR_H */
