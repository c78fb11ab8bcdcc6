#ifndef OKDLAB_H
#define OKDLAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every exported function.
 */
typedef enum OkdStatus {
  OKD_STATUS_OK = 0,
  OKD_STATUS_INVALID_ARGUMENT = 1,
  OKD_STATUS_NUMERIC_DOMAIN = 2,
  OKD_STATUS_IO = 3,
  OKD_STATUS_PARSE = 4,
  OKD_STATUS_NULL_POINTER = 5,
  OKD_STATUS_BUFFER_TOO_SMALL = 6,
  OKD_STATUS_INTERNAL = 7,
} OkdStatus;

/**
 * Opaque handle to a loaded transformer.
 */
typedef struct OkdModel OkdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to `cap`. Returns the full message
 * length including the terminator.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t okd_last_error_message(char *buf, size_t cap);

/**
 * Loads a model checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum OkdStatus okd_model_load(const char *path, struct OkdModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`okd_model_load`] not yet freed.
 */
void okd_model_free(struct OkdModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum OkdStatus okd_model_vocab_size(const struct OkdModel *model, size_t *out);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum OkdStatus okd_model_max_seq_len(const struct OkdModel *model, size_t *out);

/**
 * Writes the `[n, vocab]` row-major logits of one sequence into `out`,
 * whose capacity is `cap` floats. `out_len` receives `n * vocab`.
 *
 * # Safety
 * Pointers must be valid for the given lengths.
 */
enum OkdStatus okd_model_forward_logits(const struct OkdModel *model,
                                        const uint32_t *tokens,
                                        size_t n,
                                        float *out,
                                        size_t cap,
                                        size_t *out_len);

/**
 * Continues `prompt` by up to `max_new_tokens` tokens. A `temperature` of
 * zero or less decodes greedily; otherwise tokens are sampled with a
 * generator seeded by `seed`. Only the new tokens are written.
 *
 * # Safety
 * Pointers must be valid for the given lengths.
 */
enum OkdStatus okd_model_generate(const struct OkdModel *model,
                                  const uint32_t *prompt,
                                  size_t n,
                                  size_t max_new_tokens,
                                  double temperature,
                                  uint64_t seed,
                                  uint32_t *out,
                                  size_t cap,
                                  size_t *out_len);

/**
 * Maps bytes to token ids (byte + 3); no reserved ids are added.
 *
 * # Safety
 * Pointers must be valid for the given lengths.
 */
enum OkdStatus okd_tokenize(const uint8_t *bytes,
                            size_t n,
                            uint32_t *out,
                            size_t cap,
                            size_t *out_len);

/**
 * Maps token ids back to bytes, dropping reserved ids.
 *
 * # Safety
 * Pointers must be valid for the given lengths.
 */
enum OkdStatus okd_detokenize(const uint32_t *ids,
                              size_t n,
                              uint8_t *out,
                              size_t cap,
                              size_t *out_len);

/**
 * ROUGE-L precision, recall and F1 of a candidate against a reference.
 *
 * # Safety
 * Pointers must be valid for the given lengths.
 */
enum OkdStatus okd_rouge_l(const uint32_t *candidate,
                           size_t n_candidate,
                           const uint32_t *reference,
                           size_t n_reference,
                           double *precision,
                           double *recall,
                           double *f1);

/**
 * Uncertainty `1 - softmax(logits)[target]` of one logit row.
 *
 * # Safety
 * Pointers must be valid for the given lengths.
 */
enum OkdStatus okd_unc(const double *logits, size_t n, size_t target, double *out);

/**
 * Fraction of rows whose argmaxes agree between two `[rows, cols]`
 * logit matrices of one sentence.
 *
 * # Safety
 * `teacher` and `student` must hold `rows * cols` values.
 */
enum OkdStatus okd_top1_agreement(const double *teacher,
                                  const double *student,
                                  size_t rows,
                                  size_t cols,
                                  double *out);

/**
 * Row-wise softmax of `logits / temperature` into `out` (same size).
 *
 * # Safety
 * `logits` and `out` must hold `rows * cols` values.
 */
enum OkdStatus okd_softmax(const double *logits,
                           size_t rows,
                           size_t cols,
                           double temperature,
                           double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OKDLAB_H */
