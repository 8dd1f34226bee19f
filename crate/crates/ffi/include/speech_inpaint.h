#ifndef SPEECH_INPAINT_H
#define SPEECH_INPAINT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  SI_STATUS_OK = 0,
  SI_STATUS_NULL_POINTER = 1,
  SI_STATUS_INVALID_ARGUMENT = 2,
  SI_STATUS_SHAPE = 3,
  SI_STATUS_IO = 4,
  SI_STATUS_CHECKPOINT = 5,
  SI_STATUS_AUDIO_TOO_SHORT = 6,
  SI_STATUS_TRANSCRIPT_TOO_LONG = 7,
  SI_STATUS_NO_GAP = 8,
  SI_STATUS_NON_FINITE = 9,
  SI_STATUS_BUFFER_TOO_SMALL = 10,
  SI_STATUS_PANIC = 11,
} SiStatus;

/**
 * A loaded generator with its configuration.
 */
typedef struct SiModel SiModel;

typedef struct {
  uint32_t sample_rate;
  /**
   * Samples in one model window.
   */
  size_t window_samples;
  size_t n_frames;
  size_t n_mels;
  size_t max_transcript_bytes;
  size_t param_count;
} SiModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to `cap` bytes, into `buf`. Returns the size needed for the full
 * message including the terminator.
 *
 * # Safety
 * `buf` must be null or valid for `cap` bytes.
 */
size_t si_last_error(char *buf, size_t cap);

/**
 * Static version string.
 */
const char *si_version(void);

/**
 * Loads a checkpoint written by the trainer.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for a write.
 */
SiStatus si_model_load(const char *path, SiModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or come from [`si_model_load`] and not be used again.
 */
void si_model_free(SiModel *model);

/**
 * # Safety
 * `model` must be a live handle and `info` valid for a write.
 */
SiStatus si_model_info(const SiModel *model, SiModelInfo *info);

/**
 * Log-mel analysis of `samples` with the model's front end, written
 * frame-major into `out` (`frames × n_mels` values).
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `frames` valid for a write.
 */
SiStatus si_log_mel(const SiModel *model,
                    const double *samples,
                    size_t n_samples,
                    double *out,
                    size_t out_len,
                    size_t *frames);

/**
 * Fills a gap and writes `n_samples` output samples to `out`.
 *
 * With `gap_len == 0` and `gap_start == usize::MAX` the longest run of zero
 * samples is used. Otherwise `[gap_start, gap_start + gap_len)` is zeroed
 * and filled. A nonzero `stitch` keeps the input outside the gap.
 *
 * # Safety
 * `samples` and `out` must be valid for `n_samples` values; `text` must be a
 * NUL-terminated string.
 */
SiStatus si_inpaint(const SiModel *model,
                    const double *samples,
                    size_t n_samples,
                    const char *text,
                    size_t gap_start,
                    size_t gap_len,
                    int32_t stitch,
                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPEECH_INPAINT_H */
