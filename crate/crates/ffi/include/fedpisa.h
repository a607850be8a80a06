#ifndef FEDPISA_H
#define FEDPISA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum FpStatus {
  FP_STATUS_OK = 0,
  FP_STATUS_NULL_POINTER = 1,
  FP_STATUS_INVALID_UTF8 = 2,
  FP_STATUS_CONFIG = 3,
  FP_STATUS_SHAPE = 4,
  FP_STATUS_RUNTIME = 5,
  FP_STATUS_IO = 6,
  FP_STATUS_PANIC = 7,
} FpStatus;

// Opaque experiment configuration.
typedef struct FpConfig FpConfig;

// Opaque results of a finished experiment.
typedef struct FpResults FpResults;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread, or null if the last
// call succeeded. Valid until the next call into this library on the same
// thread.
const char *fp_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *fp_version(void);

// The built-in small-scale preset.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum FpStatus fp_config_desk(struct FpConfig **out);

// Parse and validate a TOML configuration.
//
// # Safety
// `toml` must be a NUL-terminated string; `out` must be writable.
enum FpStatus fp_config_parse(const char *toml, struct FpConfig **out);

// Apply one `key=value` override (dotted keys reach nested tables). The
// configuration is left untouched if the result fails validation.
//
// # Safety
// `cfg` must come from this library; `assignment` must be NUL-terminated.
enum FpStatus fp_config_set(struct FpConfig *cfg, const char *assignment);

// Resolved configuration as TOML. Free with [`fp_string_free`].
//
// # Safety
// `cfg` must come from this library; `out` must be writable.
enum FpStatus fp_config_to_toml(const struct FpConfig *cfg, char **out);

// # Safety
// `cfg` must be null or a handle from this library not yet freed.
void fp_config_free(struct FpConfig *cfg);

// Run the full experiment described by `cfg`.
//
// # Safety
// `cfg` must come from this library; `out` must be writable.
enum FpStatus fp_experiment_run(const struct FpConfig *cfg, struct FpResults **out);

// # Safety
// `res` must be null or a handle from this library not yet freed.
void fp_results_free(struct FpResults *res);

// Number of completed rounds, or 0 for a null handle.
//
// # Safety
// `res` must be null or a live handle.
size_t fp_results_num_rounds(const struct FpResults *res);

// Cumulative bytes transmitted, or 0 for a null handle.
//
// # Safety
// `res` must be null or a live handle.
uint64_t fp_results_total_bytes(const struct FpResults *res);

// Cumulative communication cost in GiB, or NaN for a null handle.
//
// # Safety
// `res` must be null or a live handle.
double fp_results_total_cost_gib(const struct FpResults *res);

// Mean expressive test MSE after the last round, or NaN for a null handle.
//
// # Safety
// `res` must be null or a live handle.
double fp_results_final_expressive_mse(const struct FpResults *res);

// Mean identity error after the last round, or NaN for a null handle.
//
// # Safety
// `res` must be null or a live handle.
double fp_results_final_identity_error(const struct FpResults *res);

// Per-round records as JSON lines. Free with [`fp_string_free`].
//
// # Safety
// `res` must be a live handle; `out` must be writable.
enum FpStatus fp_results_rounds_jsonl(const struct FpResults *res, char **out);

// Write the results bundle files into `dir`, creating it if needed.
//
// # Safety
// `res` must be a live handle; `dir` must be NUL-terminated.
enum FpStatus fp_results_write(const struct FpResults *res, const char *dir);

// # Safety
// `s` must be null or a string returned by this library not yet freed.
void fp_string_free(char *s);

// Cosine similarity of two length-`len` vectors; 0 when either is
// (numerically) zero.
//
// # Safety
// `u` and `v` must each point to `len` doubles; `out` must be writable.
enum FpStatus fp_cosine_similarity(const double *u, const double *v, size_t len, double *out);

// Attention weights over `n` row-major `rows x cols` factor matrices stored
// back to back in `factors`. Writes the `n x n` row-major weight matrix to
// `out`.
//
// # Safety
// `factors` must point to `n * rows * cols` doubles and `out` to room for
// `n * n` doubles.
enum FpStatus fp_attention_weights(const double *factors,
                                   size_t n,
                                   size_t rows,
                                   size_t cols,
                                   double tau,
                                   double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDPISA_H */
