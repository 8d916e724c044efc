#ifndef ADL_H
#define ADL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call. Values match the CLI exit codes.
 */
typedef enum AdlStatus {
  ADL_STATUS_OK = 0,
  ADL_STATUS_NULL_POINTER = 1,
  ADL_STATUS_INVALID_ARGUMENT = 2,
  ADL_STATUS_CORRUPT = 3,
  ADL_STATUS_NUMERICAL = 4,
  ADL_STATUS_LEAKAGE = 5,
  ADL_STATUS_MISSING_ARTIFACT = 6,
  ADL_STATUS_CONFIG = 7,
  ADL_STATUS_IO = 8,
  ADL_STATUS_INTERNAL = 9,
} AdlStatus;

/*
 Resolved run configuration.
 */
typedef struct AdlConfig AdlConfig;

/*
 A denoiser, optionally with adapters attached.
 */
typedef struct AdlModel AdlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty if none.
 Valid until the next failing call on the same thread.
 */
const char *adl_last_error(void);

/*
 Crate version as a static NUL-terminated string.
 */
const char *adl_version(void);

/*
 New configuration holding every default.

 # Safety
 `out` must be a valid pointer to writable storage for a handle.
 */
enum AdlStatus adl_config_new(struct AdlConfig **out);

/*
 Configuration parsed from a file; unspecified keys keep their defaults.

 # Safety
 `path` must be a NUL-terminated string; `out` as for [`adl_config_new`].
 */
enum AdlStatus adl_config_load(const char *path, struct AdlConfig **out);

/*
 Sets `section.key = value`; rejected values leave the config unchanged.

 # Safety
 `cfg` must be a live handle; strings must be NUL-terminated.
 */
enum AdlStatus adl_config_set(struct AdlConfig *cfg,
                              const char *section,
                              const char *key,
                              const char *value);

/*
 # Safety
 `cfg` must be null or a handle from this library not yet freed.
 */
void adl_config_free(struct AdlConfig *cfg);

/*
 Runs one pipeline stage (`gen-data`, `train-base`, ...) in `run_dir`.

 # Safety
 `cfg` must be a live handle; strings must be NUL-terminated.
 */
enum AdlStatus adl_run_stage(const struct AdlConfig *cfg, const char *run_dir, const char *stage);

/*
 Loads a base checkpoint, then adapters from `adapters_path` unless it is null.

 # Safety
 Paths must be NUL-terminated (`adapters_path` may be null); `out` must be writable.
 */
enum AdlStatus adl_model_load(const char *base_path,
                              const char *adapters_path,
                              struct AdlModel **out);

/*
 # Safety
 `model` must be null or a handle from this library not yet freed.
 */
void adl_model_free(struct AdlModel *model);

/*
 Draws sample `index` of class `class_id` with the sampler settings in `cfg`.
 Writes `size × size` pixels in `[0, 1]`, row-major, where `size` is `data.size`.

 # Safety
 Handles must be live; `out` must hold `len` doubles.
 */
enum AdlStatus adl_sample(const struct AdlModel *model,
                          const struct AdlConfig *cfg,
                          uint8_t class_id,
                          uint64_t index,
                          double *out,
                          size_t len);

/*
 MS-SSIM of two `height × width` images with default parameters.

 # Safety
 `a` and `b` must hold `height * width` doubles; `out` must be writable.
 */
enum AdlStatus adl_ms_ssim(const double *a,
                           const double *b,
                           size_t height,
                           size_t width,
                           double *out);

/*
 Dice overlap of `label` between two label masks of length `len`.

 # Safety
 `pred` and `truth` must hold `len` bytes; `out` must be writable.
 */
enum AdlStatus adl_dice(const uint8_t *pred,
                        const uint8_t *truth,
                        size_t len,
                        uint8_t label,
                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADL_H */
