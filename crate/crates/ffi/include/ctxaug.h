#ifndef CTXAUG_H
#define CTXAUG_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum CtxStatus {
  CTX_STATUS_OK = 0,
  CTX_STATUS_NULL_POINTER = 1,
  CTX_STATUS_INVALID_UTF8 = 2,
  CTX_STATUS_INVALID_ARGUMENT = 3,
  CTX_STATUS_MALFORMED_RECORD = 4,
  CTX_STATUS_UNKNOWN_TURN = 5,
  CTX_STATUS_NOT_A_PERMUTATION = 6,
  CTX_STATUS_GRAPH_MISMATCH = 7,
  CTX_STATUS_NO_VALID_SWAP = 8,
  CTX_STATUS_UNSUPPORTED_STRATEGY = 9,
  CTX_STATUS_ZERO_VECTOR = 10,
  CTX_STATUS_SHAPE_MISMATCH = 11,
  CTX_STATUS_CONFIG_INVALID = 12,
  CTX_STATUS_BUFFER_TOO_SMALL = 13,
  CTX_STATUS_EMPTY_CORPUS = 14,
  CTX_STATUS_INTERNAL = 99,
} CtxStatus;

// Opaque parsed conversation.
typedef struct CtxConversation CtxConversation;

// Opaque dependency graph.
typedef struct CtxGraph CtxGraph;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// Valid until the next call on the same thread.
const char *ctx_last_error(void);

const char *ctx_version(void);

// # Safety
// `s` must come from this library or be null.
void ctx_string_free(char *s);

// Parses one corpus record (`{id, turns: [{query, response?}], gold_passage_id?}`).
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum CtxStatus ctx_conversation_parse(const char *json, struct CtxConversation **out);

// # Safety
// `conv` must come from [`ctx_conversation_parse`] or be null.
void ctx_conversation_free(struct CtxConversation *conv);

// Number of turns, the current one included; 0 for null.
//
// # Safety
// `conv` must be a live handle or null.
size_t ctx_conversation_turn_count(const struct CtxConversation *conv);

// Reverse-chronological token sequence as JSON `{tokens, token_count, truncated}`.
//
// # Safety
// `conv` must be a live handle; `out` must be writable.
enum CtxStatus ctx_conversation_concat(const struct CtxConversation *conv,
                                       size_t max_tokens,
                                       char **out);

// Edge-free graph over `turn_count` turns.
//
// # Safety
// `conversation_id` must be a NUL-terminated string; `out` must be writable.
enum CtxStatus ctx_graph_new(const char *conversation_id, size_t turn_count, struct CtxGraph **out);

// # Safety
// `graph` must come from [`ctx_graph_new`] or be null.
void ctx_graph_free(struct CtxGraph *graph);

// Records that turn `dependent` needs turn `prerequisite` (1-based,
// `prerequisite < dependent`).
//
// # Safety
// `graph` must be a live handle.
enum CtxStatus ctx_graph_add_edge(struct CtxGraph *graph, size_t prerequisite, size_t dependent);

// Writes the ancestors of `turn` in ascending order. `*out_len` receives the
// full count; if it exceeds `capacity` nothing is written and
// `CTX_STATUS_BUFFER_TOO_SMALL` is returned.
//
// # Safety
// `out` must have room for `capacity` values; `out_len` must be writable.
enum CtxStatus ctx_graph_ancestors(const struct CtxGraph *graph,
                                   size_t turn,
                                   size_t *out,
                                   size_t capacity,
                                   size_t *out_len);

// Whether `order` (a permutation of the historical turns `1..n-1`) respects
// every edge among them.
//
// # Safety
// `order` must hold `len` values; `out` must be writable.
enum CtxStatus ctx_graph_is_linear_extension(const struct CtxGraph *graph,
                                             const size_t *order,
                                             size_t len,
                                             bool *out);

// Applies a rule strategy (`tom`, `tum` or `reo`) and returns the augmented
// conversation as JSON. `graph` may be null for `tom`.
//
// # Safety
// Handles must be live; `strategy` must be a NUL-terminated string; `out`
// must be writable.
enum CtxStatus ctx_augment_rule(const struct CtxConversation *conv,
                                const struct CtxGraph *graph,
                                const char *strategy,
                                double token_mask_ratio,
                                double turn_mask_ratio,
                                uint64_t seed,
                                char **out);

// Inserts a noisy turn (`query`, optional `response`) before the current
// query at a seeded slot.
//
// # Safety
// `conv` must be live; `query` must be a NUL-terminated string and
// `response` one or null; `out` must be writable.
enum CtxStatus ctx_insert_noisy_turn(const struct CtxConversation *conv,
                                     const char *query,
                                     const char *response,
                                     uint64_t seed,
                                     char **out);

// `history_turns + topic_count * avg_ppl`
double ctx_conversation_difficulty(size_t history_turns, size_t topic_count, double avg_ppl);

// `1 - cos(a, b)`
//
// # Safety
// `a` and `b` must hold `dim` values; `out` must be writable.
enum CtxStatus ctx_pair_difficulty(const double *a, const double *b, size_t dim, double *out);

// Mean cosine of `h` to `i` and `j`.
//
// # Safety
// Each vector must hold `dim` values; `out` must be writable.
enum CtxStatus ctx_negative_difficulty(const double *i,
                                       const double *j,
                                       const double *h,
                                       size_t dim,
                                       double *out);

// Equal-frequency buckets for `count` difficulties; ties keep input order.
//
// # Safety
// `diffs` and `out` must each hold `count` values.
enum CtxStatus ctx_assign_buckets(const double *diffs,
                                  size_t count,
                                  size_t bucket_count,
                                  size_t *out);

// Ranking loss; `negatives` is `negative_count` rows of `dim` values.
//
// # Safety
// `anchor` and `positive` must hold `dim` values, `negatives`
// `negative_count * dim`; `out` must be writable.
enum CtxStatus ctx_rank_loss(const double *anchor,
                             const double *positive,
                             const double *negatives,
                             size_t negative_count,
                             size_t dim,
                             double *out);

// Contrastive loss of anchor `v_i` against partner `v_j` at temperature `tau`.
//
// # Safety
// `v_i` and `v_j` must hold `dim` values, `negatives`
// `negative_count * dim`; `out` must be writable.
enum CtxStatus ctx_cl_loss(const double *v_i,
                           const double *v_j,
                           const double *negatives,
                           size_t negative_count,
                           size_t dim,
                           double tau,
                           double *out);

double ctx_combined_loss(double l_rank, double l_cl, double alpha);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CTXAUG_H */
