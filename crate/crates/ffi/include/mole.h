#ifndef MOLE_H
#define MOLE_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum MoleStatus {
  MOLE_STATUS_OK = 0,
  MOLE_STATUS_NULL_POINTER = 1,
  MOLE_STATUS_INVALID_ARGUMENT = 2,
  MOLE_STATUS_IO = 3,
  MOLE_STATUS_FORMAT = 4,
  MOLE_STATUS_DIMENSION = 5,
  MOLE_STATUS_NUMERIC = 6,
  MOLE_STATUS_CONTRACT = 7,
  MOLE_STATUS_CONFIG = 8,
  /**
   * Output buffer too small; the required size was still written.
   */
  MOLE_STATUS_BUFFER_TOO_SMALL = 9,
  MOLE_STATUS_INTERNAL = 10,
} MoleStatus;

/**
 * Opaque model handle.
 */
typedef struct MoleModel MoleModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread; empty after success.
 * The pointer stays valid until the next call on this thread.
 */
const char *mole_last_error_message(void);

/**
 * Loads a checkpoint file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MoleStatus mole_model_load(const char *path, struct MoleModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`mole_model_load`] and not be used afterwards.
 */
void mole_model_free(struct MoleModel *model);

/**
 * Writes feature dimension, output classes (blank included) and number of
 * MoLE layers. Any output pointer may be null.
 *
 * # Safety
 * `model` must be a live handle; non-null outputs must be writable.
 */
enum MoleStatus mole_model_info(const struct MoleModel *model,
                                size_t *feature_dim,
                                size_t *num_classes,
                                size_t *num_mole_layers);

/**
 * Frame log-posteriors, row-major `frames × num_classes`, for a row-major
 * `frames × dim` feature matrix.
 *
 * # Safety
 * `features` must hold `frames * dim` values and `out` `out_len` values.
 */
enum MoleStatus mole_model_log_probs(const struct MoleModel *model,
                                     const double *features,
                                     size_t frames,
                                     size_t dim,
                                     double *out,
                                     size_t out_len);

/**
 * Greedy transcription as UTF-8. `*needed` receives the byte length
 * including the terminating NUL; if it exceeds `capacity` nothing is
 * written to `text` and `BufferTooSmall` is returned.
 *
 * # Safety
 * `features` must hold `frames * dim` values, `text` `capacity` bytes, and
 * `needed` must be writable.
 */
enum MoleStatus mole_model_transcribe(const struct MoleModel *model,
                                      const double *features,
                                      size_t frames,
                                      size_t dim,
                                      char *text,
                                      size_t capacity,
                                      size_t *needed);

/**
 * Routing of MoLE layer `layer` (0-based, bottom first): selected expert
 * and its posterior.
 *
 * # Safety
 * `features` must hold `frames * dim` values; outputs must be writable.
 */
enum MoleStatus mole_model_route(const struct MoleModel *model,
                                 const double *features,
                                 size_t frames,
                                 size_t dim,
                                 size_t layer,
                                 size_t *selected,
                                 double *gamma);

/**
 * CTC loss of `target` (1-based labels, 0 is blank) under row-major
 * `frames × classes` log-probabilities. An infeasible target gives
 * `+inf` with status `Ok`.
 *
 * # Safety
 * `log_probs` must hold `frames * classes` values, `target` `target_len`
 * values, and `loss` must be writable.
 */
enum MoleStatus mole_ctc_loss(const double *log_probs,
                              size_t frames,
                              size_t classes,
                              const size_t *target,
                              size_t target_len,
                              double *loss);

/**
 * Character error rate of `hyp` against a non-empty `reference`.
 *
 * # Safety
 * Arrays must hold the given number of values; `out` must be writable.
 */
enum MoleStatus mole_cer(const uint32_t *hyp,
                         size_t hyp_len,
                         const uint32_t *reference,
                         size_t reference_len,
                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOLE_H */
