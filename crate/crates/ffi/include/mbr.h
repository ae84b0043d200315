#ifndef MBR_H
#define MBR_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result codes shared by all entry points.
 */
typedef enum {
  MBR_STATUS_OK = 0,
  MBR_STATUS_NULL_POINTER = 1,
  MBR_STATUS_INVALID_ARGUMENT = 2,
  MBR_STATUS_CONFIG = 3,
  MBR_STATUS_UNKNOWN_PRESET = 4,
  MBR_STATUS_DATASET = 5,
  MBR_STATUS_CHECKPOINT = 6,
  MBR_STATUS_SHAPE = 7,
  MBR_STATUS_IO = 8,
  MBR_STATUS_NON_FINITE = 9,
  MBR_STATUS_INTERNAL = 10,
} MbrStatus;

/**
 * Opaque model handle.
 */
typedef struct MbrModel MbrModel;

/**
 * Retrieval metrics returned by [`mbr_retrieval_score`].
 */
typedef struct {
  double map;
  double cmc1;
  double cmc5;
  size_t n_queries;
  size_t n_excluded;
} MbrRetrieval;

/**
 * One audited preset.
 */
typedef struct {
  uint64_t measured_params;
  double expected_params_m;
  uint64_t measured_macs;
  double expected_flops_g;
  size_t dim_slice;
  size_t dim_fg;
  bool pass;
} MbrAuditRow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next call into this library from the same thread.
 */
const char *mbr_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mbr_version(void);

/**
 * Builds a preset with seeded random weights. `base_width` and `input_size`
 * of 0 keep the full-size values; `num_classes` of 0 builds a headless model.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
MbrStatus mbr_model_new(const char *name,
                        size_t base_width,
                        size_t input_size,
                        size_t num_classes,
                        uint64_t seed,
                        MbrModel **out);

/**
 * Loads a checkpoint written by the trainer or by [`mbr_model_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
MbrStatus mbr_model_load(const char *path, MbrModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
MbrStatus mbr_model_save(const MbrModel *model, const char *path);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void mbr_model_free(MbrModel *model);

/**
 * Length of the global descriptor.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
size_t mbr_model_embedding_dim(const MbrModel *model);

/**
 * Square input side in pixels.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
size_t mbr_model_input_size(const MbrModel *model);

/**
 * Learnable parameters; `full` also counts heads and side embeddings.
 *
 * # Safety
 * `model` must come from this library and `out` be valid.
 */
MbrStatus mbr_model_param_count(const MbrModel *model, bool full, uint64_t *out);

/**
 * Embeds `n` normalized images laid out as `n x 3 x S x S` floats, writing
 * `n x dim` values to `out`. `cameras` and `views` may both be null; when
 * given, side embeddings are applied if the model has them.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
MbrStatus mbr_model_embed(const MbrModel *model,
                          const float *pixels,
                          size_t n,
                          const uint32_t *cameras,
                          const uint32_t *views,
                          float *out,
                          size_t out_len);

/**
 * Ranks the gallery for each query by Euclidean distance and scores the
 * ranking. With `filter_same_camera`, gallery entries of the query's
 * vehicle seen by the query's camera are discarded first.
 *
 * # Safety
 * Every buffer must hold the stated number of elements.
 */
MbrStatus mbr_retrieval_score(const float *query,
                              const uint64_t *query_vids,
                              const uint32_t *query_cams,
                              size_t n_query,
                              const float *gallery,
                              const uint64_t *gallery_vids,
                              const uint32_t *gallery_cams,
                              size_t n_gallery,
                              size_t dim,
                              bool filter_same_camera,
                              MbrRetrieval *out);

/**
 * Builds a full-size preset and compares it with its published sizes.
 *
 * # Safety
 * `name` must be NUL-terminated and `out` valid.
 */
MbrStatus mbr_audit_preset(const char *name, MbrAuditRow *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MBR_H */
