#ifndef EMBSEG_H
#define EMBSEG_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by all fallible functions.
 */
typedef enum EmbsegStatus {
  EMBSEG_STATUS_OK = 0,
  EMBSEG_STATUS_NULL_ARGUMENT = 1,
  EMBSEG_STATUS_INVALID_ARGUMENT = 2,
  EMBSEG_STATUS_IO = 3,
  EMBSEG_STATUS_PARSE = 4,
  EMBSEG_STATUS_DIMENSION_MISMATCH = 5,
  EMBSEG_STATUS_DOMAIN = 6,
  EMBSEG_STATUS_UNDEFINED_METRIC = 7,
  EMBSEG_STATUS_BUFFER_TOO_SMALL = 8,
  EMBSEG_STATUS_PANIC = 9,
} EmbsegStatus;

/**
 * A loaded label space.
 */
typedef struct EmbsegLabelSpace EmbsegLabelSpace;

/**
 * A loaded segmentation model checkpoint.
 */
typedef struct EmbsegModel EmbsegModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next embseg call on this thread.
 */
const char *embseg_last_error(void);

/**
 * Loads a JSONL label file (one `{name, description, embedding}` per line).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum EmbsegStatus embseg_label_space_load(const char *path, struct EmbsegLabelSpace **out);

/**
 * # Safety
 * `space` must come from [`embseg_label_space_load`] and not be used
 * afterwards. Null is ignored.
 */
void embseg_label_space_free(struct EmbsegLabelSpace *space);

/**
 * Number of labels; 0 for null.
 *
 * # Safety
 * `space` must be null or a live handle.
 */
size_t embseg_label_space_len(const struct EmbsegLabelSpace *space);

/**
 * Embedding dimension; 0 for null.
 *
 * # Safety
 * `space` must be null or a live handle.
 */
size_t embseg_label_space_dim(const struct EmbsegLabelSpace *space);

/**
 * Most cosine-similar label for `query`; ties go to the lowest id.
 *
 * # Safety
 * `query` must point to `len` doubles; `out_id` and `out_score` must be
 * writable.
 */
enum EmbsegStatus embseg_label_space_retrieve(const struct EmbsegLabelSpace *space,
                                              const double *query,
                                              size_t len,
                                              size_t *out_id,
                                              double *out_score);

/**
 * Row-major N×N cosine similarity matrix into `out` (capacity `out_len`).
 *
 * # Safety
 * `out` must point to `out_len` writable doubles.
 */
enum EmbsegStatus embseg_label_space_similarity(const struct EmbsegLabelSpace *space,
                                                double *out,
                                                size_t out_len);

/**
 * Loads a checkpoint directory written by `embseg train`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum EmbsegStatus embseg_model_load(const char *dir, struct EmbsegModel **out);

/**
 * # Safety
 * `model` must come from [`embseg_model_load`] and not be used afterwards.
 * Null is ignored.
 */
void embseg_model_free(struct EmbsegModel *model);

/**
 * Labels an H×W×F row-major feature grid by nearest-label retrieval,
 * writing H·W label ids into `out_labels`.
 *
 * # Safety
 * `features` must hold `height·width·feature_dim` doubles and
 * `out_labels` must have room for `out_len` ids.
 */
enum EmbsegStatus embseg_model_infer(const struct EmbsegModel *model,
                                     const struct EmbsegLabelSpace *space,
                                     const double *features,
                                     size_t height,
                                     size_t width,
                                     size_t feature_dim,
                                     size_t *out_labels,
                                     size_t out_len);

/**
 * mIoU of `pred` against `truth` (−1 = ignore) over `classes` labels.
 * Per-class IoU goes to `out_per_class` when it is non-null (NaN for
 * classes absent from both maps).
 *
 * # Safety
 * `pred` and `truth` must hold `len` values; `out_miou` must be writable;
 * `out_per_class`, if non-null, must hold `classes` doubles.
 */
enum EmbsegStatus embseg_miou(const size_t *pred,
                              const int64_t *truth,
                              size_t len,
                              size_t classes,
                              double *out_miou,
                              double *out_per_class);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EMBSEG_H */
