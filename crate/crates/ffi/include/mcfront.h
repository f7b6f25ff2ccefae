#ifndef MCFRONT_H
#define MCFRONT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum McfStatus {
  MCF_STATUS_OK = 0,
  MCF_STATUS_NULL_POINTER = 1,
  MCF_STATUS_INVALID_UTF8 = 2,
  MCF_STATUS_INVALID_CONFIG = 3,
  MCF_STATUS_INVALID_ARGUMENT = 4,
  MCF_STATUS_SHAPE_MISMATCH = 5,
  MCF_STATUS_IO = 6,
  MCF_STATUS_CHECKPOINT = 7,
  MCF_STATUS_BUFFER_TOO_SMALL = 8,
  MCF_STATUS_NUMERIC = 9,
  MCF_STATUS_PANIC = 10,
} McfStatus;

// A configured front-end, its surrogate head and the current weights.
typedef struct McfModel McfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next `mcf_*` call on the same thread.
const char *mcf_last_error(void);

// Library version as a static NUL-terminated string.
const char *mcf_version(void);

// Creates a model from a JSON run configuration (null selects the
// defaults) with weights initialised from the configured seed.
//
// # Safety
// `config_json` must be null or a valid NUL-terminated string; `out` must
// be a valid pointer.
enum McfStatus mcf_model_new(const char *config_json, struct McfModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must be null or a handle from [`mcf_model_new`] not yet freed.
void mcf_model_free(struct McfModel *model);

// Re-initialises the weights with `seed`.
//
// # Safety
// `model` must be a live handle.
enum McfStatus mcf_model_init(struct McfModel *model, uint64_t seed);

// Replaces the weights with a checkpoint; the tensors must match the
// model's variant and shapes.
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum McfStatus mcf_model_load_checkpoint(struct McfModel *model, const char *path);

// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum McfStatus mcf_model_save_checkpoint(const struct McfModel *model, const char *path);

// Number of trainable scalars in the front-end (the surrogate head is
// excluded).
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum McfStatus mcf_model_param_count(const struct McfModel *model, size_t *out);

// Microphone count and sample rate the model expects.
//
// # Safety
// `model` must be a live handle; the out pointers must be valid.
enum McfStatus mcf_model_input_format(const struct McfModel *model,
                                      size_t *channels,
                                      double *sample_rate);

// Width of one output row.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum McfStatus mcf_model_output_width(const struct McfModel *model, size_t *out);

// Runs the front-end in evaluation mode on a waveform laid out channel
// after channel (`channels * samples` values). Writes `rows * width`
// values row-major to `out` and the row count to `rows`. If `out_len` is
// too small, or `out` is null, only `rows` is written and
// `BufferTooSmall` is returned.
//
// # Safety
// `waveform` must point to `channels * samples` doubles, `out` to
// `out_len` doubles (or be null), and `model` must be a live handle.
enum McfStatus mcf_model_forward(const struct McfModel *model,
                                 const double *waveform,
                                 size_t channels,
                                 size_t samples,
                                 double *out,
                                 size_t out_len,
                                 size_t *rows);

// Superdirective weights for one frequency and azimuth, written as
// interleaved (re, im) pairs per microphone. `geometry_json` may be null
// for the default array; `full_array` selects all microphones instead of
// the configured pair.
//
// # Safety
// `geometry_json` must be null or NUL-terminated, `out` must point to
// `out_len` doubles and `mics` must be valid.
enum McfStatus mcf_superdirective_weights(const char *geometry_json,
                                          bool full_array,
                                          double azimuth,
                                          double freq_hz,
                                          double loading,
                                          double *out,
                                          size_t out_len,
                                          size_t *mics);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MCFRONT_H */
