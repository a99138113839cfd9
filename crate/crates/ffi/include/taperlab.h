#ifndef TAPERLAB_H
#define TAPERLAB_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum TlStatus {
  TL_STATUS_OK = 0,
  TL_STATUS_NULL_POINTER = 1,
  TL_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A numeric failure: non-finite value or degenerate policy.
   */
  TL_STATUS_NUMERIC = 3,
  TL_STATUS_CONFIG = 4,
  TL_STATUS_IO = 5,
  /**
   * The caller's output buffer is too short; the required length is
   * reported through the length out pointer.
   */
  TL_STATUS_BUFFER_TOO_SMALL = 6,
  TL_STATUS_PANIC = 7,
} TlStatus;

typedef enum TlPolicyKind {
  TL_POLICY_KIND_TABULAR = 0,
  TL_POLICY_KIND_FEATURE_LINEAR = 1,
} TlPolicyKind;

/**
 * Estimator selector for [`tl_policy_gradient`].
 */
typedef enum TlMethod {
  TL_METHOD_SFT = 0,
  TL_METHOD_NAIVE = 1,
  TL_METHOD_OPR = 2,
  TL_METHOD_TIS = 3,
  TL_METHOD_TOPR = 4,
  TL_METHOD_PPO = 5,
} TlMethod;

/**
 * A softmax policy.
 */
typedef struct TlPolicy TlPolicy;

/**
 * A synthetic task suite.
 */
typedef struct TlSuite TlSuite;

/**
 * Difficulty knobs of a generated suite.
 */
typedef struct TlTaskConfig {
  size_t n_digits;
  size_t answer_len;
  size_t n_distractors;
  size_t max_len;
} TlTaskConfig;

/**
 * Score of one response.
 */
typedef struct TlScore {
  double reward;
  bool valid;
  bool correct;
} TlScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null if none.
 *
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *tl_last_error_message(void);

/**
 * Forgets the last error on this thread.
 */
void tl_clear_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tl_version(void);

/**
 * `clip(x, a, b)`.
 */
enum TlStatus tl_clip_ratio(double x, double a, double b, double *result);

/**
 * Taper of `x` with limits `a <= b`.
 */
enum TlStatus tl_taper(double x, double a, double b, double *result);

/**
 * Derivative of the taper with respect to `x`.
 */
enum TlStatus tl_taper_derivative(double x, double a, double b, double *result);

/**
 * Effective positive proportion of a dataset with raw proportion `p` under
 * baseline `c`.
 */
enum TlStatus tl_effective_proportion(double p, double c, double *result);

/**
 * Baseline that moves raw proportion `p` to effective proportion `target`.
 */
enum TlStatus tl_baseline_for_target(double p, double target, double *result);

/**
 * Default difficulty knobs.
 */
struct TlTaskConfig tl_task_config_default(void);

/**
 * Builds a suite of `n_prompts` prompts with seeded random targets.
 */
enum TlStatus tl_suite_new(uint64_t seed,
                           size_t n_prompts,
                           const struct TlTaskConfig *config,
                           struct TlSuite **suite);

void tl_suite_free(struct TlSuite *suite);

/**
 * Number of prompts, or 0 for a null handle.
 */
size_t tl_suite_n_prompts(const struct TlSuite *suite);

/**
 * Vocabulary size, or 0 for a null handle.
 */
size_t tl_suite_vocab_size(const struct TlSuite *suite);

/**
 * Scores a response to `prompt`.
 */
enum TlStatus tl_suite_score(const struct TlSuite *suite,
                             size_t prompt,
                             const uint32_t *tokens,
                             size_t n_tokens,
                             struct TlScore *score);

/**
 * Task-shaped starting policy for `suite` with default prior settings.
 */
enum TlStatus tl_policy_new_base(const struct TlSuite *suite,
                                 enum TlPolicyKind kind,
                                 uint64_t seed,
                                 struct TlPolicy **policy);

/**
 * Loads a policy JSON written by the `taperlab` binary.
 */
enum TlStatus tl_policy_load(const char *file, struct TlPolicy **policy);

void tl_policy_free(struct TlPolicy *policy);

/**
 * Length of the parameter vector, or 0 for a null handle.
 */
size_t tl_policy_num_params(const struct TlPolicy *policy);

/**
 * Natural-log probability of `tokens` as a complete response to `prompt`.
 */
enum TlStatus tl_policy_log_prob(const struct TlPolicy *policy,
                                 size_t prompt,
                                 const uint32_t *tokens,
                                 size_t n_tokens,
                                 double *result);

/**
 * Samples one response of at most `max_len` tokens with a seeded generator.
 *
 * `tokens` must hold `capacity` entries; `max_len` entries always suffice.
 * `n_tokens` receives the response length, and `log_prob` (if non-null) its
 * log-probability.
 */
enum TlStatus tl_policy_sample(const struct TlPolicy *policy,
                               size_t prompt,
                               size_t max_len,
                               uint64_t seed,
                               uint32_t *tokens,
                               size_t capacity,
                               size_t *n_tokens,
                               double *log_prob);

/**
 * Exact expected reward of `policy` averaged over the prompts of `suite`.
 */
enum TlStatus tl_policy_expected_reward(const struct TlPolicy *policy,
                                        const struct TlSuite *suite,
                                        double *result);

/**
 * Single-trajectory gradient estimate of `method` with its default limits.
 *
 * The response was drawn by a reference policy with log-probability
 * `log_mu` and scored `reward`; positivity follows the sign of `reward`.
 * `grad` must hold `tl_policy_num_params` entries.
 */
enum TlStatus tl_policy_gradient(const struct TlPolicy *policy,
                                 enum TlMethod method,
                                 double baseline,
                                 size_t prompt,
                                 const uint32_t *tokens,
                                 size_t n_tokens,
                                 double log_mu,
                                 double reward,
                                 double *grad,
                                 size_t capacity);

/**
 * Runs every method of a TOML experiment config and writes the artifacts
 * under `out_dir`.
 */
enum TlStatus tl_run_experiment(const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TAPERLAB_H */
