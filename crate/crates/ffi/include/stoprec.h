#ifndef STOPREC_H
#define STOPREC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every exported function.
typedef enum StoprecStatus {
  STOPREC_STATUS_OK = 0,
  STOPREC_STATUS_NULL_POINTER = 1,
  STOPREC_STATUS_INVALID_UTF8 = 2,
  STOPREC_STATUS_IO = 3,
  STOPREC_STATUS_INVALID_MODEL = 4,
  STOPREC_STATUS_UNKNOWN_PAPER = 5,
  STOPREC_STATUS_INVALID_ARGUMENT = 6,
  STOPREC_STATUS_BUFFER_TOO_SMALL = 7,
  STOPREC_STATUS_PANIC = 8,
} StoprecStatus;

// Opaque handle to a loaded model.
typedef struct StoprecModel StoprecModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads the model bundle in directory `path` and stores a new handle in `out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum StoprecStatus stoprec_model_load(const char *path, struct StoprecModel **out);

// Releases a handle returned by [`stoprec_model_load`]. Null is ignored.
//
// # Safety
// `model` must be null or a live handle that is not used afterwards.
void stoprec_model_free(struct StoprecModel *model);

// Writes the number of datasets the model can recommend to `out`.
//
// # Safety
// `model` must be a live handle and `out` a valid pointer.
enum StoprecStatus stoprec_model_num_datasets(const struct StoprecModel *model, uintptr_t *out);

// Copies the id of dataset `index` into `buf` as a NUL-terminated string.
// `required`, when not null, receives the needed size, so a caller may pass
// a null `buf` first to size the buffer.
//
// # Safety
// `model` must be a live handle; `buf` must be null or point to `len`
// writable bytes; `required` must be null or valid.
enum StoprecStatus stoprec_model_dataset_id(const struct StoprecModel *model,
                                            uintptr_t index,
                                            char *buf,
                                            uintptr_t len,
                                            uintptr_t *required);

// Ranks datasets for the `num_papers` paper ids in `papers` and writes the
// `k` best dataset indices and scores, best first, to `out_indices` and
// `out_scores`. `out_scores` may be null.
//
// # Safety
// `model` must be a live handle; `papers` must point to `num_papers`
// NUL-terminated strings; `out_indices` must have room for `k` values and
// `out_scores`, when not null, likewise.
enum StoprecStatus stoprec_recommend(const struct StoprecModel *model,
                                     const char *const *papers,
                                     uintptr_t num_papers,
                                     uintptr_t k,
                                     uintptr_t *out_indices,
                                     double *out_scores);

// Copies the calling thread's last error message into `buf`; an empty
// string means the last call succeeded. Behaves like
// [`stoprec_model_dataset_id`] with respect to `required`.
//
// # Safety
// `buf` must be null or point to `len` writable bytes; `required` must be
// null or valid.
enum StoprecStatus stoprec_last_error(char *buf, uintptr_t len, uintptr_t *required);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STOPREC_H */
