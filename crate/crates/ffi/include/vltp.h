#ifndef VLTP_H
#define VLTP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum VltpStatus {
  VLTP_STATUS_OK = 0,
  VLTP_STATUS_NULL_POINTER = 1,
  // A rate, size, schedule or task was rejected.
  VLTP_STATUS_INVALID_ARGUMENT = 2,
  // A file could not be read or parsed.
  VLTP_STATUS_IO = 3,
  // A caller-provided output buffer is too small.
  VLTP_STATUS_BUFFER_TOO_SMALL = 4,
  // A Rust panic was caught at the boundary.
  VLTP_STATUS_INTERNAL = 5,
} VltpStatus;

// Opaque cost model.
typedef struct VltpCostModel VltpCostModel;

// Opaque trained model: parameters plus their configuration.
typedef struct VltpModel VltpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null if none. The
// pointer stays valid until the next failing call on this thread.
const char *vltp_last_error(void);

// Library version as a static NUL-terminated string.
const char *vltp_version(void);

// Cost model with every layer costing `baseline_gflops / layers`.
enum VltpStatus vltp_cost_model_calibrated(size_t layers,
                                           double baseline_gflops,
                                           struct VltpCostModel **out);

// Cost model counting per-layer FLOPs analytically at the retained token
// count.
enum VltpStatus vltp_cost_model_analytic(size_t layers,
                                         size_t n_tokens,
                                         size_t embed_dim,
                                         size_t heads,
                                         size_t ffn_mult,
                                         struct VltpCostModel **out);

// Adds `cost` once per pruning stage. A negative `cost` turns the
// overhead off.
enum VltpStatus vltp_cost_model_set_decoder_overhead(struct VltpCostModel *model, double cost);

void vltp_cost_model_free(struct VltpCostModel *model);

// Estimated cost of the schedule given by `len` boundaries and rates in
// `[0, 1)`. An empty schedule (`len == 0`) gives the unpruned cost.
enum VltpStatus vltp_flops_estimate(const struct VltpCostModel *model,
                                    const size_t *boundaries,
                                    const float *rates,
                                    size_t len,
                                    double *out);

// Number of tokens kept out of `n` at pruning rate `rate`.
enum VltpStatus vltp_retained_count(size_t n, float rate, size_t *out);

// Writes 1 for each of the `n` tokens kept at rate `rate` and 0 for the
// frozen ones. Ties go to the lower index.
enum VltpStatus vltp_topk_prune_mask(const float *scores, size_t n, float rate, uint8_t *out_mask);

// Patch labels of a row-major `height × width` mask: `out_labels` receives
// `(height / patch) × (width / patch)` values, 1 where the patch overlaps
// the mask.
enum VltpStatus vltp_patch_labels(const float *mask,
                                  size_t height,
                                  size_t width,
                                  size_t patch,
                                  float *out_labels,
                                  size_t out_len);

// Loads a checkpoint and its `.json` sidecar.
enum VltpStatus vltp_model_load(const char *path, struct VltpModel **out);

void vltp_model_free(struct VltpModel *model);

// Input image height and width expected by the model.
enum VltpStatus vltp_model_image_size(const struct VltpModel *model,
                                      size_t *out_height,
                                      size_t *out_width);

// Segments a channel-major `3 × H × W` image for `task` under hard top-k
// pruning with the given schedule. Writes `H × W` mask logits; positive
// means foreground.
enum VltpStatus vltp_model_segment(const struct VltpModel *model,
                                   const float *image,
                                   size_t image_len,
                                   size_t task,
                                   const size_t *boundaries,
                                   const float *rates,
                                   size_t schedule_len,
                                   float *out_logits,
                                   size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VLTP_H */
