#ifndef NOISEADAPT_H
#define NOISEADAPT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum {
  NA_STATUS_OK = 0,
  NA_STATUS_NULL_POINTER = 1,
  NA_STATUS_INVALID_ARGUMENT = 2,
  NA_STATUS_INVALID_CONFIG = 3,
  NA_STATUS_IO = 4,
  NA_STATUS_SHAPE = 5,
  NA_STATUS_NUMERIC = 6,
  NA_STATUS_PRECONDITION = 7,
  NA_STATUS_PANIC = 8,
} NaStatus;

/**
 * Run configuration (opaque).
 */
typedef struct NaConfig NaConfig;

/**
 * Trained networks and schedule (opaque).
 */
typedef struct NaModels NaModels;

/**
 * A finished stream evaluation (opaque).
 */
typedef struct NaRun NaRun;

/**
 * Step-by-step predictor for callers that own the stream (opaque).
 *
 * Alternate [`na_session_predict`] and [`na_session_observe`]. Supports the
 * `frozen` and `savi_dno_*` variants.
 */
typedef struct NaSession NaSession;

/**
 * Aggregates of a finished stream.
 */
typedef struct {
  uintptr_t steps;
  uintptr_t adapt_count;
  double mean_ssim;
  double mean_psnr;
  double mean_boundary;
  double mean_loss_total;
  double frechet;
  double mean_predict_secs;
  double mean_adapt_secs;
} NaSummary;

/**
 * Metrics of one stream step. `loss_latent` is NaN outside latent mode.
 */
typedef struct {
  uintptr_t step;
  double ssim;
  double psnr;
  double boundary;
  double loss_pixel;
  double loss_feature;
  double loss_latent;
  double loss_total;
  bool adapted;
  uint64_t prediction_hash;
} NaStep;

/**
 * Losses of one observed prediction. `latent` is NaN outside latent mode.
 */
typedef struct {
  double pixel;
  double feature;
  double latent;
  double total;
  bool adapted;
} NaLoss;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes). Returns the full message length in bytes.
 * The message is empty after a successful call.
 *
 * # Safety
 * `buf` must be NULL or point to `len` writable bytes.
 */
uintptr_t na_last_error_message(char *buf, uintptr_t len);

/**
 * New configuration holding the documented defaults.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
NaStatus na_config_new(NaConfig **out);

/**
 * Parse `key = value` text on top of the defaults.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
NaStatus na_config_parse(const char *text, NaConfig **out);

/**
 * Set one key; the config is validated afterwards and left unchanged on error.
 *
 * # Safety
 * `config` must come from this library; `key` and `value` must be NUL-terminated.
 */
NaStatus na_config_set(NaConfig *config, const char *key, const char *value);

/**
 * # Safety
 * `config` must be NULL or come from this library, and not be used afterwards.
 */
void na_config_free(NaConfig *config);

/**
 * Load the parameter files in `dir` for the model shape of `config`.
 *
 * # Safety
 * `config` must come from this library, `dir` must be NUL-terminated and `out` valid.
 */
NaStatus na_models_load(const NaConfig *config, const char *dir, NaModels **out);

/**
 * Number of f64 values in one clip (`frames * height * width`).
 *
 * # Safety
 * `models` must come from this library and `out` be valid.
 */
NaStatus na_models_clip_len(const NaModels *models, uintptr_t *out);

/**
 * # Safety
 * `models` must be NULL or come from this library, and not be used afterwards.
 */
void na_models_free(NaModels *models);

/**
 * Generate the configured stream and run the configured variant over it.
 *
 * # Safety
 * `models` and `config` must come from this library and `out` be valid.
 */
NaStatus na_run_stream(const NaModels *models, const NaConfig *config, NaRun **out);

/**
 * # Safety
 * `run` must come from this library and `out` be valid.
 */
NaStatus na_run_summary(const NaRun *run, NaSummary *out);

/**
 * Metrics of step `index` (0-based).
 *
 * # Safety
 * `run` must come from this library and `out` be valid.
 */
NaStatus na_run_step(const NaRun *run, uintptr_t index, NaStep *out);

/**
 * Write the per-step CSV.
 *
 * # Safety
 * `run` must come from this library and `path` be NUL-terminated.
 */
NaStatus na_run_write_csv(const NaRun *run, const char *path);

/**
 * # Safety
 * `run` must be NULL or come from this library, and not be used afterwards.
 */
void na_run_free(NaRun *run);

/**
 * Start a session conditioned on the first observed clip of `len` values.
 *
 * # Safety
 * `models`/`config` must come from this library, `first` must point to `len`
 * values and `out` must be valid. The session keeps its own copy of the models.
 */
NaStatus na_session_new(const NaModels *models,
                        const NaConfig *config,
                        const double *first,
                        uintptr_t len,
                        NaSession **out);

/**
 * Predict the next clip into `out` (`len` values). A previous unobserved
 * prediction is discarded.
 *
 * # Safety
 * `session` must come from this library and `out` point to `len` writable values.
 */
NaStatus na_session_predict(NaSession *session, double *out, uintptr_t len);

/**
 * Report the observed clip. Scores (and, when scheduled, adapts on) the
 * pending prediction, then conditions the next prediction on this clip.
 * Without a pending prediction only the conditioning is updated and `loss`
 * is left untouched.
 *
 * # Safety
 * `session` must come from this library, `pixels` must point to `len` values
 * and `loss` must be NULL or valid.
 */
NaStatus na_session_observe(NaSession *session, const double *pixels, uintptr_t len, NaLoss *loss);

/**
 * # Safety
 * `session` must be NULL or come from this library, and not be used afterwards.
 */
void na_session_free(NaSession *session);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NOISEADAPT_H */
