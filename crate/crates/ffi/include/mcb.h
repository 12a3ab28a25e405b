#ifndef MCB_H
#define MCB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum McbStatus {
  MCB_STATUS_OK = 0,
  MCB_STATUS_NULL_POINTER = 1,
  MCB_STATUS_INVALID_ARGUMENT = 2,
  MCB_STATUS_CONFIG = 3,
  MCB_STATUS_DATA = 4,
  MCB_STATUS_NUMERICAL = 5,
  /**
   * The linear form has zero standard error; the estimate is still written.
   */
  MCB_STATUS_ILL_POSED = 6,
  /**
   * `observe` without a pending `decide`, or `decide` twice.
   */
  MCB_STATUS_BAD_STATE = 7,
  MCB_STATUS_PANIC = 8,
} McbStatus;

/**
 * Opaque learner session.
 */
typedef struct McbSession McbSession;

/**
 * Outcome of `mcb_session_decide`.
 */
typedef struct McbDecision {
  /**
   * Step index this decision belongs to (1-based).
   */
  size_t t;
  size_t action;
  /**
   * Propensity of `action` under the policy.
   */
  double propensity;
  size_t greedy_arm;
} McbDecision;

/**
 * Flat view of an inference report.
 */
typedef struct McbInference {
  double estimate;
  double std_error;
  double ci_low;
  double ci_high;
  double z_stat;
  double p_value;
  double p_value_greater;
  double p_value_less;
} McbInference;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message on this thread, or null. Valid until the next call
 * into this library from the same thread.
 */
const char *mcb_last_error_message(void);

/**
 * Creates a session.
 *
 * `spec_json` is `{"config": {...}, "debias": true}` where `config` holds
 * d1, d2, rank, arms, horizon, phase1_len, gamma, epsilon, c2, eta, seed.
 * `init` holds `arms` row-major `d1 x d2` initial estimates back to back
 * (`init_len = arms * d1 * d2`).
 *
 * # Safety
 * `spec_json` must be a NUL-terminated string, `init` must point to
 * `init_len` doubles and `out` must be writable.
 */
enum McbStatus mcb_session_new(const char *spec_json,
                               const double *init,
                               size_t init_len,
                               struct McbSession **out);

/**
 * Restores a session from a checkpoint file written by `mcb_session_save`
 * or the `mcb` tool. The RNG restarts from a stream keyed by the step count.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum McbStatus mcb_session_load(const char *path, struct McbSession **out);

/**
 * Writes the learner and debiasing state as a JSON checkpoint.
 *
 * # Safety
 * `session` must come from this library; `path` must be NUL-terminated.
 */
enum McbStatus mcb_session_save(const struct McbSession *session, const char *path);

/**
 * Frees a session. Null is ignored.
 *
 * # Safety
 * `session` must come from this library and not be used afterwards.
 */
void mcb_session_free(struct McbSession *session);

/**
 * Number of completed steps.
 *
 * # Safety
 * `session` must come from this library; `out` writable.
 */
enum McbStatus mcb_session_step(const struct McbSession *session, size_t *out);

/**
 * Draws an ε-greedy action for request `(row, col)` (0-based).
 *
 * # Safety
 * `session` must come from this library; `out` writable.
 */
enum McbStatus mcb_session_decide(struct McbSession *session,
                                  size_t row,
                                  size_t col,
                                  struct McbDecision *out);

/**
 * Feeds back the reward of the pending decision and updates the learner.
 *
 * # Safety
 * `session` must come from this library.
 */
enum McbStatus mcb_session_observe(struct McbSession *session, double reward);

/**
 * Current estimate of arm `arm` at `(row, col)`.
 *
 * # Safety
 * `session` must come from this library; `out` writable.
 */
enum McbStatus mcb_session_predict(const struct McbSession *session,
                                   size_t arm,
                                   size_t row,
                                   size_t col,
                                   double *out);

/**
 * Debiased inference for `Q = Σ coefs[k]·e_{rows[k]} e_{cols[k]}ᵀ` on arm
 * `arm`, or on `arm − other_arm` when `other_arm >= 0`. On `ILL_POSED` the
 * estimate is written and the remaining fields are zero.
 *
 * # Safety
 * `rows`, `cols`, `coefs` must each point to `n_terms` elements; `out`
 * writable.
 */
enum McbStatus mcb_session_infer(const struct McbSession *session,
                                 const size_t *rows,
                                 const size_t *cols,
                                 const double *coefs,
                                 size_t n_terms,
                                 size_t arm,
                                 int64_t other_arm,
                                 double alpha,
                                 struct McbInference *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MCB_H */
