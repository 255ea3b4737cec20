#ifndef LMMK_H
#define LMMK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum LmmkStatus {
  LMMK_STATUS_OK = 0,
  LMMK_STATUS_NULL_POINTER = 1,
  LMMK_STATUS_INVALID_ARGUMENT = 2,
  LMMK_STATUS_SESSION_SEALED = 3,
  LMMK_STATUS_UNKNOWN_HANDLE = 4,
  LMMK_STATUS_ORDER_VIOLATION = 5,
  LMMK_STATUS_IO = 6,
  LMMK_STATUS_PARSE = 7,
  LMMK_STATUS_UNALIGNED_CLOCKS = 8,
  LMMK_STATUS_METRICS = 9,
  LMMK_STATUS_SIMULATION = 10,
  LMMK_STATUS_PANIC = 11,
} LmmkStatus;

/**
 * Inference phase kinds. Per-token kinds (decode, softmax, copy, sampling)
 * require a token index; embedding and prefill must not have one.
 */
typedef enum LmmkPhaseKind {
  LMMK_PHASE_KIND_EMBEDDING = 0,
  LMMK_PHASE_KIND_PREFILL = 1,
  LMMK_PHASE_KIND_DECODE = 2,
  LMMK_PHASE_KIND_SOFTMAX = 3,
  LMMK_PHASE_KIND_COPY_PROBS_TO_CPU = 4,
  LMMK_PHASE_KIND_SAMPLING = 5,
} LmmkPhaseKind;

/**
 * A recording session. Safe to record into from several threads.
 */
typedef struct LmmkSession LmmkSession;

/**
 * A sealed, immutable trace.
 */
typedef struct LmmkTrace LmmkTrace;

/**
 * Device-side lifecycle timestamps of one kernel, in nanoseconds.
 */
typedef struct LmmkKernelTimes {
  uint64_t cpu_enqueue_ns;
  uint64_t queued_ns;
  uint64_t submit_ns;
  uint64_t start_ns;
  uint64_t end_ns;
} LmmkKernelTimes;

/**
 * Busy/idle summary of an analysis window.
 */
typedef struct LmmkIdleSummary {
  uint64_t window_ns;
  uint64_t busy_ns;
  uint64_t idle_ns;
  double idle_fraction;
  size_t gap_count;
} LmmkIdleSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread, or NULL if
 * none. The pointer stays valid until the next failing call on the same
 * thread; do not free it.
 */
const char *lmmk_last_error_message(void);

/**
 * Current monotonic host time in nanoseconds.
 */
uint64_t lmmk_now_ns(void);

/**
 * Creates a session. Pass `has_clock_offset = false` when the device and
 * host clocks are not aligned; phase-window analyses will then fail with
 * `LMMK_STATUS_UNALIGNED_CLOCKS`.
 *
 * # Safety
 * `device_label` must be a NUL-terminated string; `out` must be writable.
 */
enum LmmkStatus lmmk_session_new(const char *device_label,
                                 bool has_clock_offset,
                                 int64_t clock_offset_ns,
                                 struct LmmkSession **out);

/**
 * Destroys a session. NULL is ignored.
 *
 * # Safety
 * `session` must come from [`lmmk_session_new`] and not be used afterwards.
 */
void lmmk_session_free(struct LmmkSession *session);

/**
 * Opens a phase at the current time. `token_index` is read only when
 * `has_token_index` is true.
 *
 * # Safety
 * `session` must be a live session; `out_handle` must be writable.
 */
enum LmmkStatus lmmk_session_begin_phase(const struct LmmkSession *session,
                                         enum LmmkPhaseKind kind,
                                         uint32_t turn,
                                         bool has_token_index,
                                         uint32_t token_index,
                                         uint64_t *out_handle);

/**
 * Closes the phase identified by `handle` at the current time.
 *
 * # Safety
 * `session` must be a live session.
 */
enum LmmkStatus lmmk_session_end_phase(const struct LmmkSession *session, uint64_t handle);

/**
 * Records one kernel with device-clock timestamps.
 *
 * # Safety
 * `session` must be a live session, `name` a NUL-terminated string and
 * `times` a readable [`LmmkKernelTimes`].
 */
enum LmmkStatus lmmk_session_record_kernel(const struct LmmkSession *session,
                                           const char *name,
                                           uint32_t queue_id,
                                           const struct LmmkKernelTimes *times);

/**
 * Seals the session and returns the trace. The session stays allocated
 * (further records fail) and must still be freed.
 *
 * # Safety
 * `session` must be a live session; `out` must be writable.
 */
enum LmmkStatus lmmk_session_seal(const struct LmmkSession *session, struct LmmkTrace **out);

/**
 * Destroys a trace. NULL is ignored.
 *
 * # Safety
 * `trace` must come from this library and not be used afterwards.
 */
void lmmk_trace_free(struct LmmkTrace *trace);

/**
 * Reads a JSONL trace file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum LmmkStatus lmmk_trace_read_jsonl(const char *path, struct LmmkTrace **out);

/**
 * Writes the trace as JSONL.
 *
 * # Safety
 * `trace` must be live; `path` must be a NUL-terminated string.
 */
enum LmmkStatus lmmk_trace_write_jsonl(const struct LmmkTrace *trace, const char *path);

/**
 * Writes the trace in the trace-viewer JSON format.
 *
 * # Safety
 * `trace` must be live; `path` must be a NUL-terminated string.
 */
enum LmmkStatus lmmk_trace_export_chrome(const struct LmmkTrace *trace, const char *path);

/**
 * Number of phase records; 0 for NULL.
 *
 * # Safety
 * `trace` must be live or NULL.
 */
size_t lmmk_trace_phase_count(const struct LmmkTrace *trace);

/**
 * Number of kernel records; 0 for NULL.
 *
 * # Safety
 * `trace` must be live or NULL.
 */
size_t lmmk_trace_kernel_count(const struct LmmkTrace *trace);

/**
 * Idle analysis of the device-clock window `[start_ns, end_ns)`.
 *
 * # Safety
 * `trace` must be live; `out` must be writable.
 */
enum LmmkStatus lmmk_trace_idle(const struct LmmkTrace *trace,
                                uint64_t start_ns,
                                uint64_t end_ns,
                                struct LmmkIdleSummary *out);

/**
 * Idle time summed over every occurrence of a phase kind.
 *
 * # Safety
 * `trace` must be live; `out` must be writable.
 */
enum LmmkStatus lmmk_trace_phase_idle(const struct LmmkTrace *trace,
                                      enum LmmkPhaseKind kind,
                                      struct LmmkIdleSummary *out);

/**
 * Accuracy (percent) and scaled error (µs per ms) of a latency pair.
 *
 * # Safety
 * `alpha_pct` and `eps_star` must be writable.
 */
enum LmmkStatus lmmk_metrics_accuracy(double t_lm_ms,
                                      double t_gt_ms,
                                      double *alpha_pct,
                                      double *eps_star);

/**
 * Harmonic score of the accuracy ratio and the two speedup ratios.
 *
 * # Safety
 * `out` must be writable.
 */
enum LmmkStatus lmmk_metrics_hq(double m_a, double m_prefill, double m_decode, double *out);

/**
 * Per-kernel latency from baseline and duplicated phase times.
 *
 * # Safety
 * `out` must be writable.
 */
enum LmmkStatus lmmk_metrics_duplication(double t_base_ms,
                                         double t_dup_ms,
                                         uint64_t n,
                                         double *out);

/**
 * Runs a built-in workload preset and returns its trace.
 *
 * # Safety
 * `preset` must be a NUL-terminated string; `out` must be writable.
 */
enum LmmkStatus lmmk_simulate_preset(const char *preset,
                                     uint32_t prompt_tokens,
                                     uint32_t output_tokens,
                                     uint64_t seed,
                                     double sigma_rel,
                                     struct LmmkTrace **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LMMK_H */
