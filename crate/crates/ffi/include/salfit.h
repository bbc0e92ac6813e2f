#ifndef SALFIT_H
#define SALFIT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum SfStatus {
  SF_STATUS_OK = 0,
  SF_STATUS_NULL_POINTER = 1,
  SF_STATUS_IO = 2,
  SF_STATUS_FORMAT = 3,
  SF_STATUS_SHAPE = 4,
  SF_STATUS_INVALID_ARGUMENT = 5,
  SF_STATUS_RUNTIME = 6,
  SF_STATUS_PANIC = 7,
} SfStatus;

// Opaque classifier handle.
typedef struct SfClassifier SfClassifier;

// Opaque masker handle; owns the classifier its activations come from.
typedef struct SfMasker SfMasker;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *sf_version(void);

// Side length of the square images the networks accept.
size_t sf_image_side(void);

// Copies the calling thread's last error message into `buf` (truncated,
// always NUL-terminated when `len > 0`). Returns the full message length
// including the terminator, or 0 when no error has been recorded.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t sf_last_error(char *buf, size_t len);

// Loads a classifier checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum SfStatus sf_classifier_load(const char *path, struct SfClassifier **out);

// Releases a classifier handle. Null is ignored.
//
// # Safety
// `c` must be null or a handle from `sf_classifier_load` not yet freed.
void sf_classifier_free(struct SfClassifier *c);

// Number of output classes, or 0 for a null handle.
//
// # Safety
// `c` must be null or a live handle.
size_t sf_classifier_num_classes(const struct SfClassifier *c);

// Class probabilities for `n` images, written row-major into `probs`
// (`n × num_classes` values).
//
// # Safety
// `images` must hold `n·64·64·3` floats and `probs` `probs_len` floats.
enum SfStatus sf_classifier_predict(const struct SfClassifier *c,
                                    const float *images,
                                    size_t n,
                                    float *probs,
                                    size_t probs_len);

// Loads a masker checkpoint. Activations come from the feature classifier
// saved next to it (`<stem>_features.bin`) when present, otherwise from a
// copy of `classifier`.
//
// # Safety
// `path` must be a NUL-terminated string, `classifier` a live handle and
// `out` writable.
enum SfStatus sf_masker_load(const char *path,
                             const struct SfClassifier *classifier,
                             struct SfMasker **out);

// Releases a masker handle. Null is ignored.
//
// # Safety
// `m` must be null or a handle from `sf_masker_load` not yet freed.
void sf_masker_free(struct SfMasker *m);

// Saliency masks in [0, 1] for `n` images, written as `n × 64 × 64`
// row-major values.
//
// # Safety
// `images` must hold `n·64·64·3` floats and `masks` `masks_len` floats.
enum SfStatus sf_masker_predict(const struct SfMasker *m,
                                const float *images,
                                size_t n,
                                float *masks,
                                size_t masks_len);

// Pixel average precision (percent) of `scores` against binary `gt`
// (0 or 1), pooled over all `len` pixels.
//
// # Safety
// `scores` and `gt` must hold `len` values; `out` must be writable.
enum SfStatus sf_pxap(const float *scores, const uint8_t *gt, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SALFIT_H */
