#ifndef LSMRAC_H
#define LSMRAC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum LsmracStatus {
  LSMRAC_STATUS_OK = 0,
  LSMRAC_STATUS_NULL_POINTER = 1,
  LSMRAC_STATUS_INVALID_ARGUMENT = 2,
  LSMRAC_STATUS_PARSE = 3,
  LSMRAC_STATUS_DIVERGED = 4,
  LSMRAC_STATUS_FACTORIZATION = 5,
  LSMRAC_STATUS_BUFFER_TOO_SMALL = 6,
  LSMRAC_STATUS_IO = 7,
  LSMRAC_STATUS_PANIC = 8,
} LsmracStatus;

/**
 * A validated scenario.
 */
typedef struct LsmracScenario LsmracScenario;

/**
 * A recorded run: column-major view of the trace CSV table.
 */
typedef struct LsmracTrace LsmracTrace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread (empty if none). The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *lsmrac_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lsmrac_version(void);

/**
 * Creates a built-in scenario (`sim1` ... `sim6-sigma`).
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LsmracStatus lsmrac_scenario_builtin(const char *name, struct LsmracScenario **out);

/**
 * Parses a scenario from TOML text.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LsmracStatus lsmrac_scenario_from_toml(const char *text, struct LsmracScenario **out);

/**
 * Overrides step, final time and record stride. Non-positive values keep
 * the current setting.
 *
 * # Safety
 * `s` must come from a scenario constructor and not be freed.
 */
enum LsmracStatus lsmrac_scenario_set_integration(struct LsmracScenario *s,
                                                  double h,
                                                  double duration,
                                                  size_t stride);

/**
 * Number of plant inputs/outputs, 0 for NULL.
 *
 * # Safety
 * `s` must be NULL or a live scenario handle.
 */
size_t lsmrac_scenario_channels(const struct LsmracScenario *s);

/**
 * Releases a scenario. NULL is ignored.
 *
 * # Safety
 * `s` must be NULL or a handle not yet freed.
 */
void lsmrac_scenario_free(struct LsmracScenario *s);

/**
 * Integrates the scenario. On divergence returns `LSMRAC_STATUS_DIVERGED`
 * and, when any sample was recorded, still stores the partial trace in
 * `out` (otherwise `*out` is NULL).
 *
 * # Safety
 * `s` must be a live scenario handle and `out` a valid pointer.
 */
enum LsmracStatus lsmrac_run(const struct LsmracScenario *s, struct LsmracTrace **out);

/**
 * Number of recorded samples, 0 for NULL.
 *
 * # Safety
 * `t` must be NULL or a live trace handle.
 */
size_t lsmrac_trace_len(const struct LsmracTrace *t);

/**
 * Number of CSV columns, 0 for NULL.
 *
 * # Safety
 * `t` must be NULL or a live trace handle.
 */
size_t lsmrac_trace_columns(const struct LsmracTrace *t);

/**
 * Name of column `j` (owned by the trace), NULL when out of range.
 *
 * # Safety
 * `t` must be NULL or a live trace handle.
 */
const char *lsmrac_trace_column_name(const struct LsmracTrace *t, size_t j);

/**
 * Copies column `j` into `buf` (capacity `len` doubles).
 *
 * # Safety
 * `t` must be a live trace handle and `buf` valid for `len` writes.
 */
enum LsmracStatus lsmrac_trace_copy_column(const struct LsmracTrace *t,
                                           size_t j,
                                           double *buf,
                                           size_t len);

/**
 * Writes the trace CSV to `path`.
 *
 * # Safety
 * `t` must be a live trace handle and `path` a NUL-terminated string.
 */
enum LsmracStatus lsmrac_trace_write_csv(const struct LsmracTrace *t, const char *path);

/**
 * Releases a trace. NULL is ignored.
 *
 * # Safety
 * `t` must be NULL or a handle not yet freed.
 */
void lsmrac_trace_free(struct LsmracTrace *t);

/**
 * Leading minors, LDU pivots and adaptation-gain threshold of the
 * row-major `m x m` matrix `k`. `minors` and `dp` must hold `m` doubles
 * each; `gamma_threshold_out` receives one value.
 *
 * # Safety
 * All pointers must be valid for the stated sizes.
 */
enum LsmracStatus lsmrac_factor(const double *k,
                                size_t m,
                                double *minors,
                                double *dp,
                                double *gamma_threshold_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LSMRAC_H */
