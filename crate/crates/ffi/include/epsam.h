#ifndef EPSAM_H
#define EPSAM_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EpsamStatus {
  EPSAM_STATUS_OK = 0,
  EPSAM_STATUS_NULL_POINTER = 1,
  EPSAM_STATUS_INVALID_ARGUMENT = 2,
  EPSAM_STATUS_SHAPE_ERROR = 3,
  EPSAM_STATUS_DOMAIN_ERROR = 4,
  EPSAM_STATUS_IO_ERROR = 5,
  EPSAM_STATUS_FORMAT_ERROR = 6,
  EPSAM_STATUS_DEGENERATE = 7,
  EPSAM_STATUS_INTERNAL = 99,
} EpsamStatus;

/**
 * Trained patch classifier.
 */
typedef struct EpsamClassifier EpsamClassifier;

/**
 * Frozen encoder plus trained mask decoder.
 */
typedef struct EpsamSegmenter EpsamSegmenter;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *epsam_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *epsam_version(void);

/**
 * # Safety
 * `path` must be a nul-terminated string and `out` a writable pointer.
 */
enum EpsamStatus epsam_classifier_load(const char *path, struct EpsamClassifier **out);

/**
 * # Safety
 * `handle` must come from [`epsam_classifier_load`] or be null.
 */
void epsam_classifier_free(struct EpsamClassifier *handle);

/**
 * Probability that the patch is positive.
 *
 * # Safety
 * `pixels` must hold `size * size * 3` doubles.
 */
enum EpsamStatus epsam_classifier_predict(const struct EpsamClassifier *handle,
                                          const double *pixels,
                                          size_t size,
                                          double *out_prob);

/**
 * Normalized CAM, optionally rotate-fused, written to `size * size` doubles.
 *
 * # Safety
 * `pixels` must hold `size * size * 3` doubles and `out_cam` `size * size`.
 */
enum EpsamStatus epsam_classifier_cam(const struct EpsamClassifier *handle,
                                      const double *pixels,
                                      size_t size,
                                      bool fused,
                                      double *out_cam);

/**
 * # Safety
 * Both paths must be nul-terminated strings and `out` a writable pointer.
 */
enum EpsamStatus epsam_segmenter_load(const char *encoder_path,
                                      const char *decoder_path,
                                      struct EpsamSegmenter **out);

/**
 * # Safety
 * `handle` must come from [`epsam_segmenter_load`] or be null.
 */
void epsam_segmenter_free(struct EpsamSegmenter *handle);

/**
 * Binary mask for a patch given `n_points` foreground prompts stored as
 * `(row, col)` pairs.
 *
 * # Safety
 * `pixels` must hold `size * size * 3` doubles, `points` `2 * n_points`
 * values and `out_mask` `size * size` bytes.
 */
enum EpsamStatus epsam_segmenter_predict(const struct EpsamSegmenter *handle,
                                         const double *pixels,
                                         size_t size,
                                         const uint32_t *points,
                                         size_t n_points,
                                         uint8_t *out_mask);

/**
 * Keeps pixels strictly above the `q`-quantile of the positive values.
 *
 * # Safety
 * `cam` must hold `h * w` doubles and `out_mask` `h * w` bytes.
 */
enum EpsamStatus epsam_quantile_threshold(const double *cam,
                                          size_t h,
                                          size_t w,
                                          double q,
                                          uint8_t *out_mask);

/**
 * Opening with a disk of the given radius.
 *
 * # Safety
 * `mask` and `out_mask` must each hold `h * w` bytes.
 */
enum EpsamStatus epsam_morph_open(const uint8_t *mask,
                                  size_t h,
                                  size_t w,
                                  size_t radius,
                                  uint8_t *out_mask);

/**
 * Normalizes a non-negative map to sum 1. An all-zero map yields zeros
 * and sets `out_degenerate`.
 *
 * # Safety
 * `activation` and `out` must hold `h * w` doubles.
 */
enum EpsamStatus epsam_entropy_map(const double *activation,
                                   size_t h,
                                   size_t w,
                                   double *out,
                                   bool *out_degenerate);

/**
 * Samples up to `k` distinct points from `activation` without replacement.
 * Writes `(row, col)` pairs and the number of points drawn.
 *
 * # Safety
 * `activation` must hold `h * w` doubles and `out_points` `2 * k` values.
 */
enum EpsamStatus epsam_sample_points(const double *activation,
                                     size_t h,
                                     size_t w,
                                     size_t k,
                                     uint64_t seed,
                                     uint32_t *out_points,
                                     size_t *out_count);

/**
 * `|initial ∩ predicted| / |predicted|`; an empty prediction gives 0 and
 * sets `out_degenerate`.
 *
 * # Safety
 * Both masks must hold `h * w` bytes.
 */
enum EpsamStatus epsam_ids(const uint8_t *initial,
                           const uint8_t *predicted,
                           size_t h,
                           size_t w,
                           double *out_value,
                           bool *out_degenerate);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EPSAM_H */
