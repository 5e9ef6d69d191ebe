#ifndef MFHCA_H
#define MFHCA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  MFHCA_STATUS_OK = 0,
  MFHCA_STATUS_NULL_POINTER = 1,
  MFHCA_STATUS_INVALID_ARGUMENT = 2,
  MFHCA_STATUS_CONFIG = 3,
  MFHCA_STATUS_DATA = 4,
  MFHCA_STATUS_IO = 5,
  MFHCA_STATUS_NUMERICAL = 6,
  MFHCA_STATUS_PANIC = 7,
} MfhcaStatus;

/**
 * Opaque model handle.
 */
typedef struct MfhcaModel MfhcaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call on the same thread.
 */
const char *mfhca_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mfhca_version(void);

/**
 * Builds a model with the default architecture.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
MfhcaStatus mfhca_model_new(uint64_t seed, MfhcaModel **out);

/**
 * Builds a model from `key = value` configuration text.
 *
 * # Safety
 * `config_text` must be a NUL-terminated string; `out` as in [`mfhca_model_new`].
 */
MfhcaStatus mfhca_model_from_config(const char *config_text, uint64_t seed, MfhcaModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` as in [`mfhca_model_new`].
 */
MfhcaStatus mfhca_model_load(const char *path, MfhcaModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be a NUL-terminated string.
 */
MfhcaStatus mfhca_model_save(MfhcaModel *model, const char *path);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from this library and must not be used afterwards.
 */
void mfhca_model_free(MfhcaModel *model);

/**
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
MfhcaStatus mfhca_model_param_count(MfhcaModel *model, size_t *out);

/**
 * Input geometry: spectrogram frames and bins, feature width and class count.
 * Null out-pointers are skipped.
 *
 * # Safety
 * `model` must come from this library; non-null outputs must be writable.
 */
MfhcaStatus mfhca_model_shape(MfhcaModel *model,
                              size_t *spec_frames,
                              size_t *spec_bins,
                              size_t *feature_dim,
                              size_t *classes);

/**
 * Evaluation-mode forward pass over `batch` segments.
 *
 * `spec` holds `batch × frames × bins` raw log spectrogram values, which are
 * standardized with the statistics stored in the model. `features` holds
 * `batch × feature_frames × feature_dim` values. Pass null for an input the
 * model's ablation does not use. `logits` receives `batch × classes` values.
 *
 * # Safety
 * Buffers must hold at least the stated number of elements.
 */
MfhcaStatus mfhca_model_forward(MfhcaModel *model,
                                size_t batch,
                                const float *spec,
                                const float *features,
                                size_t feature_frames,
                                float *logits,
                                size_t logits_len);

/**
 * Log spectrogram of one segment with the default frontend at `sample_rate`.
 * Writes `frames × bins` values to `out`; a null `out` with `out_len` zero
 * only reports the shape.
 *
 * # Safety
 * `samples` must hold `len` values; `out` must hold `out_len` values or be
 * null with `out_len` zero.
 */
MfhcaStatus mfhca_log_spectrogram(const float *samples,
                                  size_t len,
                                  uint32_t sample_rate,
                                  float *out,
                                  size_t out_len,
                                  size_t *frames,
                                  size_t *bins);

/**
 * Weighted and unweighted accuracy of a row-major `classes × classes`
 * confusion matrix (rows are true classes).
 *
 * # Safety
 * `counts` must hold `classes * classes` values; outputs must be writable.
 */
MfhcaStatus mfhca_wa_ua(const uint64_t *counts, size_t classes, double *wa, double *ua);

/**
 * Writes a `rows × cols` matrix as a feature file.
 *
 * # Safety
 * `path` must be NUL-terminated; `data` must hold `rows * cols` values.
 */
MfhcaStatus mfhca_feature_write(const char *path, const float *data, size_t rows, size_t cols);

/**
 * Reads a feature file. `rows` and `cols` are always reported; a null `out`
 * with `out_len` zero only reports the shape.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must hold `out_len` values or be null
 * with `out_len` zero.
 */
MfhcaStatus mfhca_feature_read(const char *path,
                               float *out,
                               size_t out_len,
                               size_t *rows,
                               size_t *cols);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MFHCA_H */
