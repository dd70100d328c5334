#ifndef CHAOSCOPE_H
#define CHAOSCOPE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ChaoscopeClass {
  CHAOSCOPE_CLASS_STABLE = 0,
  CHAOSCOPE_CLASS_CHAOTIC = 1,
  CHAOSCOPE_CLASS_UNSTABLE = 2,
} ChaoscopeClass;

/**
 * Result of every fallible call.
 */
typedef enum ChaoscopeStatus {
  CHAOSCOPE_STATUS_OK = 0,
  CHAOSCOPE_STATUS_NULL_POINTER = 1,
  CHAOSCOPE_STATUS_INVALID_UTF8 = 2,
  /**
   * Bad configuration, file or argument.
   */
  CHAOSCOPE_STATUS_CONFIG = 3,
  /**
   * The computation itself failed (blow-up, degenerate perturbations).
   */
  CHAOSCOPE_STATUS_NUMERICAL = 4,
  /**
   * An output buffer is too small; the needed length is reported.
   */
  CHAOSCOPE_STATUS_BUFFER_TOO_SMALL = 5,
  /**
   * A Rust panic was caught.
   */
  CHAOSCOPE_STATUS_PANIC = 6,
} ChaoscopeStatus;

/**
 * Opaque policy.
 */
typedef struct ChaoscopePolicy ChaoscopePolicy;

/**
 * Opaque closed-loop system.
 */
typedef struct ChaoscopeSystem ChaoscopeSystem;

/**
 * Spectrum estimator settings.
 */
typedef struct ChaoscopeSpectrumConfig {
  size_t steps;
  size_t period;
  size_t samples;
  double epsilon;
  double tau0;
} ChaoscopeSpectrumConfig;

/**
 * Aggregated spectrum. `mle_ci_low` / `mle_ci_high` are NaN when fewer
 * than two samples survived.
 */
typedef struct ChaoscopeSpectrumResult {
  double mle;
  double sle;
  double mle_ci_low;
  double mle_ci_high;
  enum ChaoscopeClass class_;
  /**
   * Number of exponents written (the state dimension).
   */
  size_t n_exponents;
  size_t n_excluded;
} ChaoscopeSpectrumResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next chaoscope call on the same thread.
 */
const char *chaoscope_last_error(void);

/**
 * Static description of a status code.
 */
const char *chaoscope_status_string(enum ChaoscopeStatus status);

/**
 * Default estimator settings.
 */
struct ChaoscopeSpectrumConfig chaoscope_spectrum_config_default(void);

/**
 * Create a system with default constants from its id (`"henon"`,
 * `"lorenz"`, ...).
 *
 * # Safety
 * `id` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ChaoscopeStatus chaoscope_system_new(const char *id, struct ChaoscopeSystem **out);

/**
 * Create a system from a key-value config file. Keys other than the
 * system's own are ignored here.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ChaoscopeStatus chaoscope_system_from_config(const char *path, struct ChaoscopeSystem **out);

/**
 * Release a system; null is ignored.
 *
 * # Safety
 * `sys` must come from this library and not be used afterwards.
 */
void chaoscope_system_free(struct ChaoscopeSystem *sys);

/**
 * State dimension, or 0 for a null handle.
 *
 * # Safety
 * `sys` must be null or a live handle.
 */
size_t chaoscope_system_state_dim(const struct ChaoscopeSystem *sys);

/**
 * Action dimension, or 0 for a null handle.
 *
 * # Safety
 * `sys` must be null or a live handle.
 */
size_t chaoscope_system_action_dim(const struct ChaoscopeSystem *sys);

/**
 * One transition `s' = f(s, a)`; actions outside the bounds are clamped.
 *
 * # Safety
 * `state` / `next` must hold `state_len` doubles and `action`
 * `action_len` doubles.
 */
enum ChaoscopeStatus chaoscope_system_step(const struct ChaoscopeSystem *sys,
                                           const double *state,
                                           size_t state_len,
                                           const double *action,
                                           size_t action_len,
                                           double *next);

/**
 * The zero-action policy for a system.
 *
 * # Safety
 * `sys` must be a live handle and `out` a valid pointer.
 */
enum ChaoscopeStatus chaoscope_policy_none(const struct ChaoscopeSystem *sys,
                                           struct ChaoscopePolicy **out);

/**
 * A policy that always outputs `action`.
 *
 * # Safety
 * `action` must hold `action_len` doubles; `out` must be valid.
 */
enum ChaoscopeStatus chaoscope_policy_constant(const struct ChaoscopeSystem *sys,
                                               const double *action,
                                               size_t action_len,
                                               struct ChaoscopePolicy **out);

/**
 * Load a policy weight file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ChaoscopeStatus chaoscope_policy_load(const char *path, struct ChaoscopePolicy **out);

/**
 * Release a policy; null is ignored.
 *
 * # Safety
 * `policy` must come from this library and not be used afterwards.
 */
void chaoscope_policy_free(struct ChaoscopePolicy *policy);

/**
 * Lyapunov spectrum over `cfg.samples` seeded initial states. Writes
 * the IQM exponents to `exponents` (capacity `capacity`, at least the
 * state dimension) and the summary to `result`.
 *
 * # Safety
 * Handles must be live; `exponents` must hold `capacity` doubles;
 * `cfg` and `result` must be valid pointers.
 */
enum ChaoscopeStatus chaoscope_spectrum(const struct ChaoscopeSystem *sys,
                                        const struct ChaoscopePolicy *policy,
                                        const struct ChaoscopeSpectrumConfig *cfg,
                                        uint64_t seed,
                                        double *exponents,
                                        size_t capacity,
                                        struct ChaoscopeSpectrumResult *result);

/**
 * Reward-space exponent; `-inf` when no sample shows any divergence.
 *
 * # Safety
 * Handles must be live; `cfg` and `out` must be valid pointers.
 */
enum ChaoscopeStatus chaoscope_reward_mle(const struct ChaoscopeSystem *sys,
                                          const struct ChaoscopePolicy *policy,
                                          const struct ChaoscopeSpectrumConfig *cfg,
                                          uint64_t seed,
                                          double *out);

/**
 * Interquartile mean of `n` values.
 *
 * # Safety
 * `values` must hold `n` doubles and `out` must be valid.
 */
enum ChaoscopeStatus chaoscope_iqm(const double *values, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CHAOSCOPE_H */
