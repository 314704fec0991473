#ifndef MOE_FFI_H
#define MOE_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MoeStatus {
  MOE_STATUS_OK = 0,
  MOE_STATUS_NULL_POINTER = 1,
  MOE_STATUS_INVALID_ARGUMENT = 2,
  MOE_STATUS_TRACE_ERROR = 3,
  MOE_STATUS_IO_ERROR = 4,
  MOE_STATUS_CHECKPOINT_ERROR = 5,
  MOE_STATUS_BUFFER_TOO_SMALL = 6,
  MOE_STATUS_PANIC = 7,
} MoeStatus;

/**
 * Opaque model loaded from a checkpoint.
 */
typedef struct MoeModel MoeModel;

/**
 * Opaque routing trace.
 */
typedef struct MoeTrace MoeTrace;

typedef struct MoeCostModel {
  double expert_bytes;
  double bandwidth;
  double compute_per_token;
  double shared_bytes;
} MoeCostModel;

typedef struct MoeOffloadReport {
  uint64_t tokens;
  double exrep_pct;
  uint64_t swap_events;
  double tokens_per_sec;
  uint64_t peak_resident_bytes;
  uint64_t full_model_bytes;
  double delta_uniform_pct;
  double initial_load_secs;
  double total_secs;
} MoeOffloadReport;

typedef struct MoeBles {
  uint64_t hard;
  double hard_norm;
  double soft;
  double soft_norm;
  double loss;
} MoeBles;

typedef struct MoeParamCount {
  uint64_t active;
  uint64_t total;
  uint64_t per_expert;
  uint64_t shared;
} MoeParamCount;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * is valid until the next failing call on the same thread.
 */
const char *moe_last_error_message(void);

/**
 * Builds a trace from `ids`, laid out as `[layer][token][k]`.
 *
 * # Safety
 * `ids` must point to `layers * tokens * k` values and `out` must be
 * writable.
 */
enum MoeStatus moe_trace_from_selections(const uint32_t *ids,
                                         size_t layers,
                                         size_t tokens,
                                         size_t k,
                                         size_t num_experts,
                                         struct MoeTrace **out);

/**
 * Single-layer trace from an expert-major 0/1 matrix of
 * `experts * tokens` cells.
 *
 * # Safety
 * `cells` must point to `experts * tokens` bytes and `out` must be writable.
 */
enum MoeStatus moe_trace_from_activity_matrix(const uint8_t *cells,
                                              size_t experts,
                                              size_t tokens,
                                              struct MoeTrace **out);

/**
 * Reads a line-delimited JSON trace file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` must be writable.
 */
enum MoeStatus moe_trace_load(const char *path, struct MoeTrace **out);

/**
 * # Safety
 * `trace` must come from this library; `path` must be NUL-terminated.
 */
enum MoeStatus moe_trace_save(const struct MoeTrace *trace, const char *path);

/**
 * # Safety
 * `trace` must come from this library and outputs must be writable.
 */
enum MoeStatus moe_trace_shape(const struct MoeTrace *trace,
                               size_t *layers,
                               size_t *tokens,
                               size_t *num_experts);

/**
 * Hard transition count `H` and its normalization for one layer.
 *
 * # Safety
 * `trace` must come from this library and outputs must be writable.
 */
enum MoeStatus moe_trace_hard_replacements(const struct MoeTrace *trace,
                                           size_t layer,
                                           uint64_t *hard,
                                           double *hard_norm);

/**
 * # Safety
 * `trace` must come from this library and `out` must be writable.
 */
enum MoeStatus moe_trace_exrep(const struct MoeTrace *trace, double *out);

/**
 * Overall deviation from uniform usage; when `per_layer` is non-null it
 * receives one value per layer.
 *
 * # Safety
 * `trace` must come from this library; `per_layer`, if non-null, must
 * hold `layers` values.
 */
enum MoeStatus moe_trace_delta_uniform(const struct MoeTrace *trace,
                                       double *overall,
                                       double *per_layer);

/**
 * # Safety
 * Pointers must be valid; `trace` must come from this library.
 */
enum MoeStatus moe_replay_offload(const struct MoeTrace *trace,
                                  const struct MoeCostModel *cost,
                                  struct MoeOffloadReport *out);

/**
 * # Safety
 * `trace` must come from this library or be null.
 */
void moe_trace_free(struct MoeTrace *trace);

/**
 * BlES terms for routing probabilities `weights` (`batch*tokens*experts`)
 * and selections `ids` (`batch*tokens*k`).
 *
 * # Safety
 * Buffers must hold the stated number of elements and `out` be writable.
 */
enum MoeStatus moe_bles_loss(const double *weights,
                             const uint32_t *ids,
                             size_t batch,
                             size_t tokens,
                             size_t experts,
                             size_t k,
                             struct MoeBles *out);

/**
 * Sequence-level load balancing over `layers * sequences * experts`
 * fractions `f` and mean probabilities `p`.
 *
 * # Safety
 * Buffers must hold the stated number of elements and `out` be writable.
 */
enum MoeStatus moe_load_balance_loss(const double *f,
                                     const double *p,
                                     size_t layers,
                                     size_t sequences,
                                     size_t experts,
                                     double *out);

/**
 * Parameter accounting of a layout. `expert_kind` is 0 for dense and 1
 * for weight-decomposed experts.
 *
 * # Safety
 * `out` must be writable.
 */
enum MoeStatus moe_param_count(size_t layers,
                               size_t hidden,
                               size_t inter,
                               size_t vocab,
                               size_t seq_len,
                               size_t experts,
                               size_t active,
                               uint32_t expert_kind,
                               size_t rank,
                               struct MoeParamCount *out);

/**
 * # Safety
 * `path` must be NUL-terminated and `out` writable.
 */
enum MoeStatus moe_model_load(const char *path, struct MoeModel **out);

/**
 * Vocabulary size of a loaded model.
 *
 * # Safety
 * `model` must come from this library and `out` be writable.
 */
enum MoeStatus moe_model_vocab_size(const struct MoeModel *model, size_t *out);

/**
 * Greedy generation of `n` tokens. `out_tokens` receives prompt plus
 * generated ids and must hold `capacity >= prompt_len + n` values. When
 * `out_trace` is non-null it receives a new trace handle.
 *
 * # Safety
 * Buffers must hold the stated number of elements; `model` must come
 * from this library.
 */
enum MoeStatus moe_model_generate(const struct MoeModel *model,
                                  const uint32_t *prompt,
                                  size_t prompt_len,
                                  size_t n,
                                  uint32_t *out_tokens,
                                  size_t capacity,
                                  struct MoeTrace **out_trace);

/**
 * # Safety
 * `model` must come from this library or be null.
 */
void moe_model_free(struct MoeModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOE_FFI_H */
