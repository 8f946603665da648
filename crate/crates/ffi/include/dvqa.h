#ifndef DVQA_H
#define DVQA_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DvqaStatus {
  DVQA_STATUS_OK = 0,
  DVQA_STATUS_NULL_ARGUMENT = 1,
  DVQA_STATUS_INVALID_UTF8 = 2,
  DVQA_STATUS_CONFIG = 3,
  DVQA_STATUS_UNKNOWN_QUESTION = 4,
  DVQA_STATUS_RETRIEVAL = 5,
  DVQA_STATUS_PROMPT = 6,
  DVQA_STATUS_GATEWAY = 7,
  DVQA_STATUS_INVALID_ARGUMENT = 8,
  DVQA_STATUS_NOT_FOUND = 9,
  DVQA_STATUS_PANIC = 99,
} DvqaStatus;

/**
 * Opaque engine handle.
 */
typedef struct DvqaEngine DvqaEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a TOML engine config and builds an engine.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DvqaStatus dvqa_engine_open(const char *config_path, struct DvqaEngine **out);

/**
 * # Safety
 * `engine` must come from [`dvqa_engine_open`] and not be used afterwards.
 */
void dvqa_engine_free(struct DvqaEngine *engine);

/**
 * Answers one question about one image. On success `*out_json` holds the
 * verdict, reasoning and exemplars as JSON.
 *
 * `selection_stage` is 1 for on, 0 for off, and -1 to keep the config value.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum DvqaStatus dvqa_ask(const struct DvqaEngine *engine,
                         const char *image_ref,
                         const char *question,
                         int32_t selection_stage,
                         char **out_json);

/**
 * Classifies a question against the engine's registry; `*out_json` gets
 * the registry entry.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum DvqaStatus dvqa_classify(const struct DvqaEngine *engine,
                              const char *question,
                              char **out_json);

/**
 * Extracts a count from free text: the last integer, else the last number
 * word. Returns `NOT_FOUND` when there is neither.
 *
 * # Safety
 * `text` must be NUL-terminated and `out` valid.
 */
enum DvqaStatus dvqa_parse_count(const char *text, uint64_t *out);

/**
 * Cosine similarity of two `len`-float vectors.
 *
 * # Safety
 * `a` and `b` must each point at `len` floats.
 */
enum DvqaStatus dvqa_cosine(const float *a, const float *b, size_t len, double *out);

/**
 * # Safety
 * `s` must come from this library, or be null.
 */
void dvqa_string_free(char *s);

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *dvqa_last_error_message(void);

const char *dvqa_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DVQA_H */
