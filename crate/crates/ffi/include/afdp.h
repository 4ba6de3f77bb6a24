#ifndef AFDP_H
#define AFDP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every C-ABI call.
 */
typedef enum {
  AfdpOk = 0,
  AfdpNullPointer = 1,
  AfdpInvalidArgument = 2,
  AfdpRuntimeError = 3,
  AfdpBufferTooSmall = 4,
} AfdpStatus;

/**
 * Opaque deterministic random stream.
 */
typedef struct AfdpRng AfdpRng;

/**
 * Opaque completed-run handle.
 */
typedef struct AfdpRunRecord AfdpRunRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message of this thread into `buf` (NUL terminated,
 * truncated to `len`). Returns the status of the copy itself.
 */
AfdpStatus afdp_last_error_message(char *buf, uintptr_t len);

/**
 * Create a random stream from a seed and stream index. The pair matches
 * the library's per-edge stream derivation, so stream `k + 1` reproduces
 * edge `k` of a run with the same seed.
 */
AfdpRng *afdp_rng_new(uint64_t seed, uint64_t stream);

/**
 * # Safety
 * `rng` must be a pointer from [`afdp_rng_new`], not yet freed.
 */
void afdp_rng_free(AfdpRng *rng);

/**
 * Draw one privacy-noise vector of `dim` components into `out`.
 *
 * # Safety
 * `rng` must be a live handle; `out` must point to `dim` writable doubles.
 */
AfdpStatus afdp_sample_noise(AfdpRng *rng,
                             double epsilon,
                             double sensitivity,
                             uintptr_t dim,
                             double *out);

/**
 * Clip `gradient` (length `dim`, modified in place) to norm at most `bound`.
 *
 * # Safety
 * `gradient` must point to `dim` writable doubles.
 */
AfdpStatus afdp_clip_gradient(double *gradient, uintptr_t dim, double bound);

/**
 * Variance-calibrated starting sensitivity.
 *
 * # Safety
 * `out` must be a writable double.
 */
AfdpStatus afdp_initial_sensitivity(double sigma, uintptr_t batch, double delta, double *out);

/**
 * Worst-case sensitivity `2G / b` from a gradient-norm bound.
 *
 * # Safety
 * `out` must be a writable double.
 */
AfdpStatus afdp_sensitivity_from_bound(double grad_bound, uintptr_t batch, double *out);

/**
 * Learning rate at iteration `t` for a JSON-encoded rate policy (the
 * serde form of the library's `RatePolicy`).
 *
 * # Safety
 * `policy_json` must be a NUL-terminated string; `out` a writable double.
 */
AfdpStatus afdp_rate_at(const char *policy_json, uint64_t t, double *out);

/**
 * Run a full simulation from JSON-encoded run config and model spec (the
 * serde forms of the library's `RunConfig` and `ModelSpec`). Quadratic
 * models pair with the synthetic quadratic dataset; classifier specs are
 * rejected here because sample data cannot cross this ABI.
 *
 * # Safety
 * Both strings must be NUL-terminated; `out` must be writable.
 */
AfdpStatus afdp_run_quadratic(const char *config_json,
                              const char *spec_json,
                              double noise_sigma,
                              AfdpRunRecord **out);

/**
 * Number of recorded iterations.
 *
 * # Safety
 * `record` must be a live handle; `out` writable.
 */
AfdpStatus afdp_run_record_len(const AfdpRunRecord *record, uint64_t *out);

/**
 * Total privacy budget spent over the run.
 *
 * # Safety
 * `record` must be a live handle; `out` writable.
 */
AfdpStatus afdp_run_record_budget_spent(const AfdpRunRecord *record, double *out);

/**
 * Copy the final model into `buf`. `buf_len` holds the capacity on entry
 * and the model dimension on exit; call with `buf == NULL` to query the
 * required size.
 *
 * # Safety
 * `record` must be a live handle; `buf` (when non-null) must hold
 * `*buf_len` doubles; `buf_len` must be writable.
 */
AfdpStatus afdp_run_record_final_model(const AfdpRunRecord *record,
                                       double *buf,
                                       uintptr_t *buf_len);

/**
 * Write the run's CSV log to `path`.
 *
 * # Safety
 * `record` must be a live handle; `path` a NUL-terminated string.
 */
AfdpStatus afdp_run_record_write_csv(const AfdpRunRecord *record, const char *path);

/**
 * # Safety
 * `record` must be a pointer from [`afdp_run_quadratic`], not yet freed.
 */
void afdp_run_record_free(AfdpRunRecord *record);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AFDP_H */
