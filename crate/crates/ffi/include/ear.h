#ifndef EAR_H
#define EAR_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum EarStatus {
  EAR_STATUS_OK = 0,
  EAR_STATUS_NULL_ARGUMENT = 1,
  EAR_STATUS_INVALID_ARGUMENT = 2,
  EAR_STATUS_IO = 3,
  EAR_STATUS_FORMAT = 4,
  EAR_STATUS_BUFFER_TOO_SMALL = 5,
  EAR_STATUS_PANIC = 6,
} EarStatus;

// Trained weights bound to the world they were trained on.
typedef struct EarModel EarModel;

// A synthetic concept world.
typedef struct EarWorld EarWorld;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *ear_version(void);

// Message for the most recent failure on this thread, or null. Valid until
// the next failing call on the same thread.
const char *ear_last_error_message(void);

// # Safety
// `out` must be valid for writing one pointer.
enum EarStatus ear_world_new(uint64_t seed, struct EarWorld **out);

// # Safety
// `path` must be a NUL-terminated string and `out` valid for writing.
enum EarStatus ear_world_load(const char *path, struct EarWorld **out);

// # Safety
// `world` must come from `ear_world_new` or `ear_world_load`, or be null.
void ear_world_free(struct EarWorld *world);

// Index of a concept by name.
//
// # Safety
// Pointers must be valid; `name` NUL-terminated.
enum EarStatus ear_world_concept_index(const struct EarWorld *world,
                                       const char *name,
                                       size_t *out_index);

// Loads a checkpoint, rejecting one trained on a different world.
//
// # Safety
// `world` must be a live handle, `path` NUL-terminated, `out` writable.
enum EarStatus ear_model_load(const struct EarWorld *world,
                              const char *path,
                              struct EarModel **out);

// # Safety
// `model` must come from `ear_model_load`, or be null.
void ear_model_free(struct EarModel *model);

// Number of image tokens the model generates per prompt, or 0 for null.
//
// # Safety
// `model` must be a live handle or null.
size_t ear_model_image_tokens(const struct EarModel *model);

// Generates image tokens for `prompt`. `temperature <= 0` decodes greedily.
// Writes the token count to `out_len` even when `capacity` is too small.
//
// # Safety
// `out_tokens` must be writable for `capacity` elements.
enum EarStatus ear_generate(const struct EarModel *model,
                            const char *prompt,
                            double temperature,
                            uint64_t seed,
                            uint32_t *out_tokens,
                            size_t capacity,
                            size_t *out_len);

// Generates and decodes to RGB bytes, row-major, `side * side * 3` long.
//
// # Safety
// `out_rgb` must be writable for `capacity` bytes.
enum EarStatus ear_render(const struct EarModel *model,
                          const char *prompt,
                          double temperature,
                          uint64_t seed,
                          uint8_t *out_rgb,
                          size_t capacity,
                          size_t *out_len,
                          size_t *out_side);

// Runs the world's motif classifier on an RGB image.
//
// # Safety
// `rgb` must be readable for `len` bytes; outputs must be writable.
enum EarStatus ear_classify(const struct EarWorld *world,
                            const uint8_t *rgb,
                            size_t len,
                            size_t side,
                            size_t concept,
                            bool *out_present,
                            double *out_score);

// Splits `0..t` into windows of length `w`; writes `[start, end)` pairs to
// `out_bounds` as `2 * count` values.
//
// # Safety
// `out_bounds` must be writable for `capacity` elements.
enum EarStatus ear_partition_windows(size_t t,
                                     size_t w,
                                     size_t *out_bounds,
                                     size_t capacity,
                                     size_t *out_count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EAR_H */
