#ifndef SONAR_PROPOSALS_H
#define SONAR_PROPOSALS_H

/* Generated by cbindgen from sonar-proposals-ffi; edit the Rust source instead. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call in this interface.
 */
typedef enum SpnStatus {
  SPN_STATUS_OK = 0,
  SPN_STATUS_NULL_ARGUMENT = 1,
  SPN_STATUS_INVALID_ARGUMENT = 2,
  SPN_STATUS_IO = 3,
  SPN_STATUS_PARSE = 4,
  SPN_STATUS_NUMERIC = 5,
  SPN_STATUS_BUFFER_TOO_SMALL = 6,
  SPN_STATUS_PANIC = 7,
} SpnStatus;

/**
 * Opaque handle to a loaded scorer.
 */
typedef struct SpnModel SpnModel;

/**
 * One proposal: a pixel-aligned box plus its objectness score.
 */
typedef struct SpnProposal {
  int64_t x;
  int64_t y;
  int64_t w;
  int64_t h;
  float score;
} SpnProposal;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the most recent error message on this thread into `buf`
 * (NUL-terminated, truncated to `capacity`). Returns the full message
 * length in bytes, excluding the terminator; 0 means no error recorded.
 * Passing a null `buf` or zero `capacity` only queries the length.
 */
size_t spn_last_error(char *buf, size_t capacity);

/**
 * Loads a weights file and returns a scorer handle in `out_model`. The
 * file may hold either a trained network or a template bank; both kinds
 * serve every scoring call in this interface.
 */
enum SpnStatus spn_model_load(const char *path, struct SpnModel **out_model);

/**
 * Releases a handle returned by [`spn_model_load`]. Null is a no-op.
 */
void spn_model_free(struct SpnModel *model);

/**
 * Writes 1 to `out_flag` if the handle wraps a template bank, 0 if it
 * wraps a network.
 */
enum SpnStatus spn_model_is_template_bank(const struct SpnModel *model, uint8_t *out_flag);

/**
 * Scores one 96x96 patch. `pixels` must hold exactly 96 * 96 row-major
 * values; the objectness lands in `out_score`.
 */
enum SpnStatus spn_score_patch(const struct SpnModel *model,
                               const float *pixels,
                               size_t len,
                               float *out_score);

/**
 * Computes the dense objectness grid over all stride-aligned 96x96
 * windows of a `width` x `height` image. Grid dimensions land in
 * `out_rows` / `out_cols`; row-major values are copied into `out_values`
 * when it is non-null. Returns `SPN_STATUS_BUFFER_TOO_SMALL` when
 * `capacity` cannot hold the full grid (dimensions are still written, so
 * a null-values call sizes the buffer).
 */
enum SpnStatus spn_objectness_grid(const struct SpnModel *model,
                                   const float *pixels,
                                   size_t width,
                                   size_t height,
                                   size_t stride,
                                   float *out_values,
                                   size_t capacity,
                                   size_t *out_rows,
                                   size_t *out_cols);

/**
 * Extracts the `top_k` highest-scoring windows and suppresses overlaps
 * above `overlap_threshold`. Survivors are copied into `out` in rank
 * order; the survivor count lands in `out_count`. A null `out` only
 * queries the count; `SPN_STATUS_BUFFER_TOO_SMALL` still sets `out_count`
 * so the caller can retry with a larger buffer.
 */
enum SpnStatus spn_proposals(const struct SpnModel *model,
                             const float *pixels,
                             size_t width,
                             size_t height,
                             size_t stride,
                             size_t top_k,
                             double overlap_threshold,
                             struct SpnProposal *out,
                             size_t capacity,
                             size_t *out_count);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SONAR_PROPOSALS_H */
