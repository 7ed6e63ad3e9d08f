#ifndef CONDIFF_H
#define CONDIFF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum CondiffStatus {
  CONDIFF_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  CONDIFF_STATUS_NULL_ARGUMENT = 1,
  /**
   * A path or string argument was not valid UTF-8.
   */
  CONDIFF_STATUS_INVALID_UTF8 = 2,
  CONDIFF_STATUS_IO = 3,
  /**
   * A file exists but its bytes do not parse as the expected format.
   */
  CONDIFF_STATUS_FORMAT = 4,
  /**
   * A buffer or tensor size does not match the model.
   */
  CONDIFF_STATUS_SHAPE = 5,
  /**
   * An argument value is outside the function's contract.
   */
  CONDIFF_STATUS_INVALID_ARGUMENT = 6,
  /**
   * A non-finite value was produced mid-computation.
   */
  CONDIFF_STATUS_NUMERIC = 7,
  /**
   * A required artifact (checkpoint, dataset) is absent.
   */
  CONDIFF_STATUS_MISSING_ARTIFACT = 8,
  CONDIFF_STATUS_CONFIG = 9,
} CondiffStatus;

/**
 * How combined control features enter the decoder.
 */
typedef enum CondiffMode {
  /**
   * Control stacks merged pairwise, then injected with a data-dependent
   * gain.
   */
  CONDIFF_MODE_MINIMAL_IMPACT = 0,
  /**
   * Plain per-level sum.
   */
  CONDIFF_MODE_VANILLA_ADD = 1,
} CondiffMode;

/**
 * An opaque sampler: one frozen base plus zero or more control branches,
 * each with its current condition.
 */
typedef struct CondiffModel CondiffModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread; valid until the next
 * failure on the same thread. Never null.
 */
const char *condiff_last_error(void);

/**
 * Library version as a static string.
 */
const char *condiff_version(void);

/**
 * Opens a checkpoint as a sampler. A branch checkpoint starts with a fully
 * silent condition; a base checkpoint samples unconditionally. Returns null
 * on failure (see [`condiff_last_error`]).
 *
 * # Safety
 * `path` must be a valid NUL-terminated C string.
 */
struct CondiffModel *condiff_open(const char *path);

/**
 * Releases a handle. Null is a no-op.
 *
 * # Safety
 * `model` must be null or a pointer returned by [`condiff_open`] that has
 * not been freed yet.
 */
void condiff_free(struct CondiffModel *model);

/**
 * Data dimension of the model, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t condiff_dim(const struct CondiffModel *model);

/**
 * Number of diffusion steps, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t condiff_horizon(const struct CondiffModel *model);

/**
 * Number of control branches, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t condiff_branch_count(const struct CondiffModel *model);

/**
 * Adds another branch checkpoint sharing the same frozen base; it starts
 * with a fully silent condition.
 *
 * # Safety
 * `model` must be a live handle; `path` a valid NUL-terminated C string.
 */
enum CondiffStatus condiff_add_branch(struct CondiffModel *model, const char *path);

/**
 * Sets branch `index`'s condition from two length-`len` arrays: a 0/1
 * reveal mask and the revealed values (zero outside the mask).
 *
 * # Safety
 * `model` must be a live handle; `mask` and `values` must point to `len`
 * readable doubles.
 */
enum CondiffStatus condiff_set_condition(struct CondiffModel *model,
                                         uintptr_t index,
                                         const double *mask,
                                         const double *values,
                                         uintptr_t len);

/**
 * Switches how combined control features enter the decoder.
 *
 * # Safety
 * `model` must be a live handle.
 */
enum CondiffStatus condiff_set_mode(struct CondiffModel *model, enum CondiffMode mode);

/**
 * Draws `n` samples into `out`, row-major `n × dim`. `out_len` must equal
 * `n * dim`. Identical seeds give identical samples.
 *
 * # Safety
 * `model` must be a live handle; `out` must point to `out_len` writable
 * doubles.
 */
enum CondiffStatus condiff_sample(const struct CondiffModel *model,
                                  uintptr_t n,
                                  uint64_t seed,
                                  double *out,
                                  uintptr_t out_len);

/**
 * One denoiser evaluation: predicts the noise in state `x` at timestep `t`.
 * `x_len` and `out_len` must equal the model dimension.
 *
 * # Safety
 * `model` must be a live handle; `x` must point to `x_len` readable and
 * `out` to `out_len` writable doubles.
 */
enum CondiffStatus condiff_predict(const struct CondiffModel *model,
                                   const double *x,
                                   uintptr_t x_len,
                                   uintptr_t t,
                                   double *out,
                                   uintptr_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONDIFF_H */
