#ifndef REBAFL_H
#define REBAFL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  REBAFL_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  REBAFL_STATUS_NULL_ARGUMENT = 1,
  /**
   * Invalid configuration or argument value.
   */
  REBAFL_STATUS_CONFIG = 2,
  /**
   * Dataset, partition or file-format problem.
   */
  REBAFL_STATUS_DATA = 3,
  /**
   * Non-finite values or an ill-posed loss.
   */
  REBAFL_STATUS_NUMERICAL = 4,
  REBAFL_STATUS_IO = 5,
  /**
   * Invalid UTF-8 in a string argument.
   */
  REBAFL_STATUS_UTF8 = 6,
  /**
   * Internal error or caught panic.
   */
  REBAFL_STATUS_INTERNAL = 7,
} RebaflStatus;

/**
 * Opaque simulation handle.
 */
typedef struct RebaflRun RebaflRun;

/**
 * One round of a run.
 */
typedef struct {
  size_t round;
  size_t active_count;
  double accuracy;
  double diversity;
  bool skipped;
} RebaflRoundInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *rebafl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rebafl_version(void);

void rebafl_string_free(char *s);

/**
 * Create a run from a JSON experiment config. `data_root_dir` may be null to
 * use `$REBAFL_DATA_DIR` or `./data`.
 */
RebaflStatus rebafl_run_new(const char *config_json, const char *data_root_dir, RebaflRun **out);

void rebafl_run_free(RebaflRun *run);

/**
 * Execute one round. Sets `*finished` and leaves `*info` untouched once
 * all configured rounds have run.
 */
RebaflStatus rebafl_run_step(RebaflRun *run, RebaflRoundInfo *info, bool *finished);

/**
 * Number of rounds completed so far.
 */
size_t rebafl_run_rounds_done(const RebaflRun *run);

/**
 * Round log as CSV (`round,active_count,accuracy,diversity,skipped`).
 */
RebaflStatus rebafl_run_rounds_csv(const RebaflRun *run, char **out);

/**
 * Current global model and prototypes as a JSON checkpoint.
 */
RebaflStatus rebafl_run_checkpoint_json(const RebaflRun *run, char **out);

/**
 * Smoothed label prior of `classes` counts into `out[classes]`.
 */
RebaflStatus rebafl_smoothed_prior(const size_t *counts,
                                   size_t classes,
                                   double epsilon,
                                   double *out);

/**
 * Mean relaxed balanced-softmax loss of row-major `logits[rows * classes]`
 * under the smoothed prior of `counts[classes]`. When `grad` is non-null
 * it receives dL/dlogits (`rows * classes` values).
 */
RebaflStatus rebafl_rbsm_loss(const double *logits,
                              size_t rows,
                              size_t classes,
                              const size_t *labels,
                              const size_t *counts,
                              double epsilon,
                              double *loss,
                              double *grad);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REBAFL_H */
