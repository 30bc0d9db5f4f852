#ifndef AETTA_H
#define AETTA_H

/* Generated by cbindgen from aetta-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code returned by every fallible call.
typedef enum AettaStatus {
  AETTA_STATUS_OK = 0,
  // A required pointer argument was null.
  AETTA_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  AETTA_STATUS_INVALID_UTF8 = 2,
  // Filesystem problem; details via `aetta_last_error_message`.
  AETTA_STATUS_IO = 3,
  // Malformed config, checkpoint, or policy text.
  AETTA_STATUS_PARSE = 4,
  // A configuration constraint was violated.
  AETTA_STATUS_INVALID_CONFIG = 5,
  // An input buffer had the wrong length.
  AETTA_STATUS_SHAPE_MISMATCH = 6,
  // Attention collapsed onto special tokens or the episode failed.
  AETTA_STATUS_DEGENERATE = 7,
  // Anything else; details via `aetta_last_error_message`.
  AETTA_STATUS_INTERNAL = 8,
} AettaStatus;

// Opaque: an adaptation stream (model replica, policy, optimizer state,
// and the last episode record).
typedef struct AettaEngine AettaEngine;

// Opaque: a loaded model plus its pristine snapshot.
typedef struct AettaModel AettaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static string; do not free.
const char *aetta_version(void);

// Load a model checkpoint from `path` into a new handle.
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid pointer.
enum AettaStatus aetta_model_load(const char *path, struct AettaModel **out);

// Initialize a fresh model from flat `key = value` config text (the same
// `model.*` keys the CLI accepts; missing keys use the toy defaults).
//
// # Safety
// `config_text` must be a valid NUL-terminated string and `out` valid.
enum AettaStatus aetta_model_from_config(const char *config_text, struct AettaModel **out);

// Save the model to a checkpoint file.
//
// # Safety
// `model` must be a live handle from this library; `path` a valid string.
enum AettaStatus aetta_model_save(const struct AettaModel *model, const char *path);

// # Safety
// `model` must be a handle from this library, not yet freed; null is a no-op.
void aetta_model_free(struct AettaModel *model);

// Pixel count one image buffer must carry (channels × height × width).
//
// # Safety
// `model` must be a live handle; `out` a valid pointer.
enum AettaStatus aetta_model_image_len(const struct AettaModel *model, size_t *out);

// # Safety
// `model` must be a live handle; `out` a valid pointer.
enum AettaStatus aetta_model_num_classes(const struct AettaModel *model, size_t *out);

// Classify one image without adaptation. `logits_out` may be null; when
// non-null it must hold `num_classes` doubles.
//
// # Safety
// `model` must be a live handle; `pixels` must point to `pixels_len`
// doubles; `out_class` must be valid; `logits_out` null or `logits_len` long.
enum AettaStatus aetta_model_predict(const struct AettaModel *model,
                                     const double *pixels,
                                     size_t pixels_len,
                                     size_t *out_class,
                                     double *logits_out,
                                     size_t logits_len);

// Create an adaptation engine bound to a replica of `model`.
// `policy_text` uses the CLI's flat `policy.*` keys; pass null or an empty
// string for the defaults (Adam lr 1e-4, moments carried over).
//
// # Safety
// `model` must be a live handle; `out` valid; `policy_text` null or valid.
enum AettaStatus aetta_engine_new(const struct AettaModel *model,
                                  const char *policy_text,
                                  struct AettaEngine **out);

// Run one adaptation episode on an unlabeled image and return the adapted
// prediction. The full episode record is available afterwards through
// `aetta_engine_last_episode_json`.
//
// # Safety
// `engine` must be a live handle; `pixels` must point to `pixels_len`
// doubles; `out_class` must be valid.
enum AettaStatus aetta_engine_adapt_predict(struct AettaEngine *engine,
                                            const double *pixels,
                                            size_t pixels_len,
                                            size_t *out_class);

// JSON of the most recent episode record, or an error if none exists yet.
// The returned string is owned by the caller; free with `aetta_string_free`.
//
// # Safety
// `engine` must be a live handle; `out` a valid pointer.
enum AettaStatus aetta_engine_last_episode_json(const struct AettaEngine *engine, char **out);

// Reset the engine: weights back to the snapshot, optimizer state dropped.
//
// # Safety
// `engine` must be a live handle.
enum AettaStatus aetta_engine_reset(struct AettaEngine *engine);

// # Safety
// `engine` must be a handle from this library, not yet freed; null is a no-op.
void aetta_engine_free(struct AettaEngine *engine);

// Message for the most recent error on this thread, or null when none.
// The returned string is owned by the caller; free with `aetta_string_free`.
char *aetta_last_error_message(void);

// # Safety
// `s` must have been returned by this library and not yet freed; null is a
// no-op.
void aetta_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AETTA_H */
