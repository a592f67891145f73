#ifndef SCALEGRPO_H
#define SCALEGRPO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SgStatus {
  SG_STATUS_OK = 0,
  SG_STATUS_FAILED = 1,
  SG_STATUS_INVALID_ARGUMENT = 2,
  SG_STATUS_NUMERIC = 3,
  SG_STATUS_REWARD_UNAVAILABLE = 4,
  SG_STATUS_UNSUPPORTED_VERSION = 5,
  SG_STATUS_NULL_POINTER = 6,
  SG_STATUS_PANIC = 7,
} SgStatus;

/**
 * A loaded checkpoint.
 */
typedef struct SgModel SgModel;

/**
 * A GRPO run in progress.
 */
typedef struct SgTrainer SgTrainer;

/**
 * Inference settings. `top_k == 0` and `top_p <= 0` disable those filters.
 */
typedef struct SgSamplerSettings {
  double tau;
  double cfg_scale;
  size_t top_k;
  double top_p;
  uint64_t seed;
} SgSamplerSettings;

typedef struct SgModelInfo {
  size_t n_classes;
  size_t height;
  size_t width;
  size_t vocab;
  size_t param_count;
  size_t iteration;
} SgModelInfo;

typedef struct SgIterationMetrics {
  size_t iter;
  double reward_mean;
  double reward_min;
  double reward_max;
  double kl_mean;
  double clip_frac;
  double loss;
  double adv_abs_mean;
  uint64_t wall_ms;
} SgIterationMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *sg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sg_version(void);

struct SgSamplerSettings sg_sampler_default(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SgStatus sg_model_load(const char *path, struct SgModel **out_model);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum SgStatus sg_model_save(const struct SgModel *model, const char *path);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards. Null is ignored.
 */
void sg_model_free(struct SgModel *model);

/**
 * # Safety
 * `model` must come from this library; `info` must be writable.
 */
enum SgStatus sg_model_info(const struct SgModel *model, struct SgModelInfo *info);

/**
 * Draw one image of `class_id` into `out_rgb`, row-major RGB in `[0, 1]`.
 * `out_len` must be at least `height * width * 3`.
 *
 * # Safety
 * `model` must come from this library; `out_rgb` must hold `out_len` floats.
 */
enum SgStatus sg_model_sample(const struct SgModel *model,
                              size_t class_id,
                              struct SgSamplerSettings settings,
                              float *out_rgb,
                              size_t out_len);

/**
 * Mean Rec. 709 luma of a row-major RGB image.
 *
 * # Safety
 * `rgb` must hold `height * width * 3` floats; `out` must be writable.
 */
enum SgStatus sg_brightness(const float *rgb, size_t height, size_t width, double *out_value);

/**
 * Group-normalised advantages of `n` rewards.
 *
 * # Safety
 * `rewards` and `out_advantages` must each hold `n` doubles.
 */
enum SgStatus sg_compute_advantages(const double *rewards, size_t n, double *out_advantages);

/**
 * Start (or resume) GRPO from `model`. `config_json` is an experiment
 * configuration document whose `grpo` and `reward` sections are used; null
 * means all defaults.
 *
 * # Safety
 * `model` must come from this library; `config_json` null or NUL-terminated;
 * `out_trainer` writable.
 */
enum SgStatus sg_trainer_new(const struct SgModel *model,
                             const char *config_json,
                             struct SgTrainer **out_trainer);

/**
 * Run one iteration. On failure the trainer is unchanged.
 *
 * # Safety
 * `trainer` must come from this library; `out_metrics` null or writable.
 */
enum SgStatus sg_trainer_step(struct SgTrainer *trainer, struct SgIterationMetrics *out_metrics);

/**
 * Snapshot the current weights, reference and optimiser state as a model.
 *
 * # Safety
 * `trainer` must come from this library; `out_model` writable.
 */
enum SgStatus sg_trainer_snapshot(const struct SgTrainer *trainer, struct SgModel **out_model);

/**
 * # Safety
 * `trainer` must come from this library and not be used afterwards. Null is ignored.
 */
void sg_trainer_free(struct SgTrainer *trainer);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCALEGRPO_H */
