#ifndef PAP_H
#define PAP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PapLabel {
  PAP_LABEL_NORMAL = 0,
  PAP_LABEL_ABNORMAL = 1,
} PapLabel;

typedef enum PapStatus {
  PAP_STATUS_OK = 0,
  PAP_STATUS_NULL_POINTER = 1,
  PAP_STATUS_INVALID_ARGUMENT = 2,
  PAP_STATUS_IO = 3,
  PAP_STATUS_CHECKPOINT = 4,
  PAP_STATUS_SHAPE = 5,
  PAP_STATUS_PANIC = 6,
  PAP_STATUS_INTERNAL = 7,
} PapStatus;

/**
 * Opaque classifier handle.
 */
typedef struct PapClassifier PapClassifier;

/**
 * Opaque U-Net handle.
 */
typedef struct PapUNet PapUNet;

/**
 * Headline metrics of a 2×2 confusion matrix (Abnormal positive).
 */
typedef struct PapMetrics {
  double accuracy;
  double precision_weighted;
  double recall_weighted;
  double f1_weighted;
  /**
   * Non-zero when some 0/0 ratio was taken as 0.
   */
  int32_t undefined_ratio;
} PapMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until
 * the next call into this library from the same thread.
 */
const char *pap_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pap_version(void);

/**
 * Loads a classifier checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PapStatus pap_classifier_load(const char *path, struct PapClassifier **out);

/**
 * # Safety
 * `handle` must come from [`pap_classifier_load`] and not be used afterwards.
 */
void pap_classifier_free(struct PapClassifier *handle);

/**
 * Side length of the square network input (images are resized to it).
 *
 * # Safety
 * Pointers must be valid.
 */
enum PapStatus pap_classifier_input_size(const struct PapClassifier *handle, size_t *out);

/**
 * Classifies one interleaved 8-bit image. Writes class probabilities
 * (Normal, Abnormal) to `probs_out[0..2]` and the decision to `label`.
 *
 * # Safety
 * `pixels` must hold `width·height·channels` bytes; `probs_out` must
 * hold two doubles; all pointers must be valid.
 */
enum PapStatus pap_classifier_predict(const struct PapClassifier *handle,
                                      const uint8_t *pixels,
                                      size_t width,
                                      size_t height,
                                      size_t channels,
                                      double *probs_out,
                                      enum PapLabel *label);

/**
 * Grad-CAM heatmap for `target_class` (0 Normal, 1 Abnormal), written as
 * `size × size` doubles in [0, 1] where `size` is the input size.
 *
 * # Safety
 * `pixels` must hold `width·height·channels` bytes and `heatmap` must hold
 * `heatmap_len` doubles.
 */
enum PapStatus pap_classifier_grad_cam(const struct PapClassifier *handle,
                                       const uint8_t *pixels,
                                       size_t width,
                                       size_t height,
                                       size_t channels,
                                       int32_t target_class,
                                       double *heatmap,
                                       size_t heatmap_len);

/**
 * Loads a U-Net checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PapStatus pap_unet_load(const char *path, struct PapUNet **out);

/**
 * # Safety
 * `handle` must come from [`pap_unet_load`] and not be used afterwards.
 */
void pap_unet_free(struct PapUNet *handle);

/**
 * Segments an image whose sides are multiples of 8. Writes `width·height`
 * bytes (0 or 255) to `mask`. `refine` non-zero enables the blur and
 * open/close clean-up.
 *
 * # Safety
 * `pixels` must hold `width·height·channels` bytes and `mask` must hold
 * `mask_len` bytes.
 */
enum PapStatus pap_unet_segment(const struct PapUNet *handle,
                                const uint8_t *pixels,
                                size_t width,
                                size_t height,
                                size_t channels,
                                double threshold,
                                int32_t refine,
                                uint8_t *mask,
                                size_t mask_len);

/**
 * Support-weighted metrics of a confusion matrix with Abnormal positive.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum PapStatus pap_metrics_from_confusion(uint64_t tp,
                                          uint64_t fn_,
                                          uint64_t fp,
                                          uint64_t tn,
                                          struct PapMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PAP_H */
