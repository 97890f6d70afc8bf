#ifndef SPARSE_VERIFY_H
#define SPARSE_VERIFY_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SvStatus {
  SV_STATUS_OK = 0,
  SV_STATUS_NULL_POINTER = 1,
  SV_STATUS_INVALID_ARGUMENT = 2,
  SV_STATUS_CONFIG = 3,
  SV_STATUS_CONTEXT_OVERFLOW = 4,
  SV_STATUS_MISSING_PROFILE_ENTRY = 5,
  SV_STATUS_LAYER_COVERAGE = 6,
  SV_STATUS_IO = 7,
  SV_STATUS_PARSE = 8,
  SV_STATUS_BUFFER_TOO_SMALL = 9,
  SV_STATUS_PANIC = 10,
} SvStatus;

typedef enum SvModelSize {
  SV_MODEL_SIZE_SMALL = 0,
  SV_MODEL_SIZE_DEFAULT = 1,
} SvModelSize;

typedef enum SvPrecisionClass {
  SV_PRECISION_CLASS_STRICT = 0,
  SV_PRECISION_CLASS_REUSE_ONLY = 1,
  SV_PRECISION_CLASS_APPROX_ONLY = 2,
  SV_PRECISION_CLASS_APPROX_REUSE = 3,
} SvPrecisionClass;

/**
 * Target model plus its truncated draft.
 */
typedef struct SvEngine SvEngine;

typedef struct SvProfile SvProfile;

typedef struct SvRefiner SvRefiner;

/**
 * Summary of a speculative decode.
 */
typedef struct SvDecodeStats {
  size_t steps;
  size_t total_accepted;
  double total_latency;
  double mean_accepted;
  size_t refinement_events;
} SvDecodeStats;

/**
 * Aggregated per-step accounting.
 */
typedef struct SvStepAccounting {
  size_t unique_loads;
  size_t requested_loads;
  size_t index_constructions;
  size_t launches;
  size_t window_tokens;
} SvStepAccounting;

/**
 * Cost model coefficients, in the order of the accounting fields.
 */
typedef struct SvCostCoeffs {
  double c_block;
  double c_index;
  double c_launch;
  double c_window;
  double c_base;
} SvCostCoeffs;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *sv_last_error(void);

/**
 * Build a seeded target model and a draft made of its first `draft_depth` layers.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum SvStatus sv_engine_new(enum SvModelSize size,
                            uint64_t seed,
                            size_t draft_depth,
                            struct SvEngine **out);

/**
 * # Safety
 * `engine` must come from [`sv_engine_new`] and not be used afterwards.
 */
void sv_engine_free(struct SvEngine *engine);

/**
 * # Safety
 * `engine` must be a live handle or null.
 */
size_t sv_engine_layers(const struct SvEngine *engine);

/**
 * Greedy autoregressive decode of `steps` tokens.
 *
 * # Safety
 * `prompt` holds `prompt_len` tokens; `out_tokens` has room for `out_cap`.
 */
enum SvStatus sv_decode_autoregressive(const struct SvEngine *engine,
                                       const uint32_t *prompt,
                                       size_t prompt_len,
                                       size_t steps,
                                       uint32_t *out_tokens,
                                       size_t out_cap,
                                       size_t *out_len);

/**
 * Speculative decode of `steps` tokens.
 *
 * The strategy comes from `strategy` (`D,k,T,C,M`, with `schedule` as a
 * comma list, `none` or `alt`) or, when `strategy` is null, from `profile`.
 * `refine` enables runtime refinement and needs a profile. Latency uses the
 * default cost model. `stats` may be null.
 *
 * # Safety
 * Pointers must be valid for the given lengths; string arguments are
 * NUL-terminated or null.
 */
enum SvStatus sv_decode_speculative(const struct SvEngine *engine,
                                    const uint32_t *prompt,
                                    size_t prompt_len,
                                    size_t steps,
                                    enum SvPrecisionClass class_,
                                    const char *strategy,
                                    const char *schedule,
                                    const struct SvProfile *profile,
                                    bool refine,
                                    uint32_t *out_tokens,
                                    size_t out_cap,
                                    size_t *out_len,
                                    struct SvDecodeStats *stats);

/**
 * Load a profile table from its JSON text.
 *
 * # Safety
 * `json` is NUL-terminated; `out` is valid.
 */
enum SvStatus sv_profile_from_json(const char *json, struct SvProfile **out);

/**
 * # Safety
 * `profile` must come from [`sv_profile_from_json`] and not be used afterwards.
 */
void sv_profile_free(struct SvProfile *profile);

/**
 * Rank-1 strategy for a context length and class, written as its label.
 *
 * # Safety
 * `buf` has room for `cap` bytes; `out_needed` and `out_expected_a` are valid
 * (the latter may be null).
 */
enum SvStatus sv_preselect(const struct SvProfile *profile,
                           size_t context_len,
                           enum SvPrecisionClass class_,
                           char *buf,
                           size_t cap,
                           size_t *out_needed,
                           double *out_expected_a);

/**
 * Start a refinement guard at the rank-1 strategy with default parameters.
 *
 * # Safety
 * `profile` is live; `out` is valid.
 */
enum SvStatus sv_refiner_new(const struct SvProfile *profile,
                             size_t context_len,
                             enum SvPrecisionClass class_,
                             struct SvRefiner **out);

/**
 * # Safety
 * `refiner` must come from [`sv_refiner_new`] and not be used afterwards.
 */
void sv_refiner_free(struct SvRefiner *refiner);

/**
 * Feed one step (1-based `step`). `out_changed` is set when the active
 * strategy changed.
 *
 * # Safety
 * Handles are live; `out_changed` is valid or null.
 */
enum SvStatus sv_refiner_step(struct SvRefiner *refiner,
                              const struct SvProfile *profile,
                              size_t accepted,
                              double latency,
                              size_t step,
                              bool *out_changed);

/**
 * Number of strategy switches so far.
 *
 * # Safety
 * `refiner` is a live handle or null.
 */
size_t sv_refiner_events(const struct SvRefiner *refiner);

/**
 * Label of the active strategy.
 *
 * # Safety
 * `buf` has room for `cap` bytes; `out_needed` is valid.
 */
enum SvStatus sv_refiner_active(const struct SvRefiner *refiner,
                                char *buf,
                                size_t cap,
                                size_t *out_needed);

/**
 * Resolve a reuse set into per-layer roles. `out_sources[l]` is -1 for a
 * refresh layer, else the refresh layer whose indices layer `l` inherits.
 *
 * # Safety
 * `reuse` holds `reuse_len` ids; `out_sources` holds `n_layers` slots.
 */
enum SvStatus sv_resolve_layer_roles(size_t n_layers,
                                     const size_t *reuse,
                                     size_t reuse_len,
                                     int64_t *out_sources);

/**
 * Merge the block sets of a query group. `blocks` concatenates the sets,
 * `set_lens[i]` is the length of set `i`. Writes the unique block ids and
 * the requested load count.
 *
 * # Safety
 * Pointers are valid for their lengths.
 */
enum SvStatus sv_merged_schedule(const uint32_t *blocks,
                                 const size_t *set_lens,
                                 size_t n_sets,
                                 uint32_t *out_unique,
                                 size_t out_cap,
                                 size_t *out_len,
                                 size_t *out_requested);

/**
 * Modeled latency of one verification step. Null `coeffs` uses the defaults.
 *
 * # Safety
 * `acc` and `out` are valid; `coeffs` is valid or null.
 */
enum SvStatus sv_estimate_latency(const struct SvStepAccounting *acc,
                                  const struct SvCostCoeffs *coeffs,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPARSE_VERIFY_H */
