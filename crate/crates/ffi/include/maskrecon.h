#ifndef MASKRECON_H
#define MASKRECON_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Success.
 */
#define MR_OK 0

/**
 * Invalid argument or configuration.
 */
#define MR_ERR_ARGUMENT 2

/**
 * Data, file format, or io failure.
 */
#define MR_ERR_DATA 3

/**
 * Numeric failure (non-finite values, internal panic).
 */
#define MR_ERR_NUMERIC 4

/**
 * Opaque handle to a trained or initialized model.
 */
typedef struct MrModel MrModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mr_version(void);

/**
 * Message for the most recent failure on this thread. Valid until the next
 * failing call on the same thread; empty string when nothing failed yet.
 */
const char *mr_last_error_message(void);

/**
 * Loads a checkpoint into a fresh handle. On success writes the handle to
 * `out` and returns MR_OK; the caller owns it and must free it with
 * `mr_model_free`.
 */
int32_t mr_model_load(const char *path, struct MrModel **out);

/**
 * Writes the model to a checkpoint file.
 */
int32_t mr_model_save(const struct MrModel *model, const char *path);

/**
 * Releases a handle returned by `mr_model_load`. Null is a no-op.
 */
void mr_model_free(struct MrModel *model);

/**
 * Number of input channels the model expects, or -1 on null.
 */
int32_t mr_model_input_channels(const struct MrModel *model);

/**
 * Number of classes the classifier head emits, or -1 on null.
 */
int32_t mr_model_num_classes(const struct MrModel *model);

/**
 * Longest window the positional table covers, or -1 on null.
 */
int32_t mr_model_max_len(const struct MrModel *model);

/**
 * Classifies a batch in eval mode and writes one label per window to
 * `out_labels` (length `num_windows`).
 */
int32_t mr_model_classify(const struct MrModel *model,
                          const double *data,
                          size_t num_windows,
                          size_t window_len,
                          size_t channels,
                          uint32_t *out_labels);

/**
 * Reconstructs a batch in eval mode, writing the same-shaped result to
 * `out` (length num_windows * window_len * channels).
 */
int32_t mr_model_reconstruct(const struct MrModel *model,
                             const double *data,
                             size_t num_windows,
                             size_t window_len,
                             size_t channels,
                             double *out);

/**
 * Zeroes the listed time rows and channel columns of one row-major
 * `window_len` x `channels` window, in place. Out-of-range or duplicate
 * indices are rejected before anything is written.
 */
int32_t mr_mask_apply(double *values,
                      size_t window_len,
                      size_t channels,
                      const size_t *time_indices,
                      size_t time_len,
                      const size_t *channel_indices,
                      size_t channel_len);

/**
 * Macro-averaged F1 of `len` predictions against labels over
 * `num_classes` classes, written to `out_f1`.
 */
int32_t mr_macro_f1(const uint32_t *preds,
                    const uint32_t *labels,
                    size_t len,
                    size_t num_classes,
                    double *out_f1);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* MASKRECON_H */
