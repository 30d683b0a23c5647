#ifndef TACO_H
#define TACO_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TacoStatus {
  TACO_STATUS_OK = 0,
  TACO_STATUS_NULL_POINTER = 1,
  TACO_STATUS_INVALID_CONFIG = 2,
  TACO_STATUS_INVALID_ARGUMENT = 3,
  TACO_STATUS_DIMENSION_MISMATCH = 4,
  TACO_STATUS_NON_FINITE = 5,
  TACO_STATUS_DIVERGED = 6,
  TACO_STATUS_IO = 7,
  TACO_STATUS_PANIC = 8,
  TACO_STATUS_OTHER = 9,
} TacoStatus;

/**
 * Opaque experiment configuration.
 */
typedef struct TacoConfig TacoConfig;

/**
 * Opaque finished-run report.
 */
typedef struct TacoReport TacoReport;

/**
 * Opaque amortized sensitivity state.
 */
typedef struct TacoSensitivity TacoSensitivity;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into this library on the same thread.
 */
const char *taco_last_error_message(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void taco_string_free(char *s);

/**
 * Temperature-scaled per-task batch sizes for `num_tasks` dataset sizes.
 *
 * # Safety
 * `sizes` and `out` must point to `num_tasks` elements.
 */
enum TacoStatus taco_mixing_batch_sizes(const size_t *sizes,
                                        size_t num_tasks,
                                        double temperature,
                                        size_t total,
                                        size_t *out);

/**
 * Shannon entropy (nats) of a probability vector.
 *
 * # Safety
 * `q` must point to `len` elements and `out` to one.
 */
enum TacoStatus taco_task_entropy(const double *q, size_t len, double *out);

/**
 * Softmax of `sigma / tau` across `num_tasks` tasks.
 *
 * # Safety
 * `sigma` and `out` must point to `num_tasks` elements.
 */
enum TacoStatus taco_task_distribution(const double *sigma,
                                       size_t num_tasks,
                                       double tau,
                                       double *out);

/**
 * A configuration holding the library defaults.
 */
struct TacoConfig *taco_config_new(void);

/**
 * # Safety
 * `cfg` must come from [`taco_config_new`] and not have been freed.
 */
void taco_config_free(struct TacoConfig *cfg);

/**
 * Sets one configuration key, with the same names and value syntax as the
 * `taco` binary's `--set`.
 *
 * # Safety
 * `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
 */
enum TacoStatus taco_config_set(struct TacoConfig *cfg, const char *key, const char *value);

/**
 * Trains and evaluates per `cfg`; on success `*out` receives a report handle.
 *
 * # Safety
 * `cfg` must be a live handle and `out` writable.
 */
enum TacoStatus taco_run_experiment(const struct TacoConfig *cfg, struct TacoReport **out);

/**
 * # Safety
 * `report` must come from [`taco_run_experiment`] and not have been freed.
 */
void taco_report_free(struct TacoReport *report);

/**
 * Average validation R-precision after the final episode; NaN on NULL.
 *
 * # Safety
 * `report` must be a live handle or NULL.
 */
double taco_report_avg_r_precision(const struct TacoReport *report);

/**
 * Fraction of task-specific parameters; NaN if the run has no sensitivity
 * state (task-specific models) or on NULL.
 *
 * # Safety
 * `report` must be a live handle or NULL.
 */
double taco_report_fraction_task_specific(const struct TacoReport *report);

/**
 * The full report as JSON; release with [`taco_string_free`].
 *
 * # Safety
 * `report` must be a live handle and `out` writable.
 */
enum TacoStatus taco_report_to_json(const struct TacoReport *report, char **out);

/**
 * Fresh sensitivity state for `dim` parameters and `num_tasks` tasks with a
 * fixed temperature. Returns NULL on invalid settings (see
 * [`taco_last_error_message`]).
 */
struct TacoSensitivity *taco_sensitivity_new(size_t dim,
                                             size_t num_tasks,
                                             double beta,
                                             double tau,
                                             double burn_in_fraction,
                                             uint64_t total_steps);

/**
 * # Safety
 * `state` must come from [`taco_sensitivity_new`] and not have been freed.
 */
void taco_sensitivity_free(struct TacoSensitivity *state);

/**
 * One adaptive step: folds `grads` into the state, writes the
 * sensitivity-weighted combination into the `dim` elements of `out`, then
 * advances the step counter. `grads` holds `num_tasks` task gradients of
 * length `dim`, one after another; `params` the current `dim` parameters.
 *
 * # Safety
 * `state` must be a live handle; buffers must have the lengths above.
 */
enum TacoStatus taco_sensitivity_step(struct TacoSensitivity *state,
                                      const double *grads,
                                      const double *params,
                                      double *out);

/**
 * Number of steps folded in so far; 0 on NULL.
 *
 * # Safety
 * `state` must be a live handle or NULL.
 */
uint64_t taco_sensitivity_steps(const struct TacoSensitivity *state);

/**
 * Writes the combination of `grads` (layout as in
 * [`taco_sensitivity_step`]) under the current state, without updating it.
 *
 * # Safety
 * `state` must be a live handle; buffers must have the lengths above.
 */
enum TacoStatus taco_sensitivity_combine(const struct TacoSensitivity *state,
                                         const double *grads,
                                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TACO_H */
