#ifndef MTOP_H
#define MTOP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MtopStatus {
  MTOP_STATUS_OK = 0,
  MTOP_STATUS_NULL_POINTER = 1,
  MTOP_STATUS_INVALID_ARGUMENT = 2,
  MTOP_STATUS_IO = 3,
  MTOP_STATUS_CHECKPOINT = 4,
  MTOP_STATUS_BUFFER_TOO_SMALL = 5,
  MTOP_STATUS_INTERNAL = 6,
} MtopStatus;

/**
 * Opaque model handle.
 */
typedef struct MtopHandle MtopHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *mtop_last_error(void);

/**
 * Loads a checkpoint written by `mtop train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum MtopStatus mtop_model_load(const char *path, struct MtopHandle **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `handle` must come from [`mtop_model_load`] and not be used afterwards.
 */
void mtop_model_free(struct MtopHandle *handle);

/**
 * # Safety
 * `handle` must be live; `out` writable.
 */
enum MtopStatus mtop_model_num_tasks(const struct MtopHandle *handle, size_t *out);

/**
 * # Safety
 * `handle` must be live; `out` writable.
 */
enum MtopStatus mtop_model_num_classes(const struct MtopHandle *handle, size_t task, size_t *out);

/**
 * Number of floats [`mtop_predict_all`] writes for `batch` examples.
 *
 * # Safety
 * `handle` must be live; `out` writable.
 */
enum MtopStatus mtop_output_len(const struct MtopHandle *handle, size_t batch, size_t *out);

/**
 * Predicts every task for a batch.
 *
 * `tokens` holds the examples' token ids back to back; `lengths[i]` is the
 * length of example `i`. Probabilities are written task by task, each task
 * a row-major `batch x classes` block.
 *
 * # Safety
 * `tokens` must hold `sum(lengths)` ids, `lengths` `batch` entries and
 * `out` `out_len` floats.
 */
enum MtopStatus mtop_predict_all(const struct MtopHandle *handle,
                                 const uint32_t *tokens,
                                 const size_t *lengths,
                                 size_t batch,
                                 float *out,
                                 size_t out_len);

/**
 * Encoder passes performed by this handle since load or the last reset.
 *
 * # Safety
 * `handle` must be live; `out` writable.
 */
enum MtopStatus mtop_forward_passes(const struct MtopHandle *handle, uint64_t *out);

/**
 * # Safety
 * `handle` must be live.
 */
enum MtopStatus mtop_reset_forward_passes(const struct MtopHandle *handle);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MTOP_H */
