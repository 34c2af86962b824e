#ifndef LUMACURVE_H
#define LUMACURVE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LcStatus {
  LC_STATUS_OK = 0,
  LC_STATUS_NULL_POINTER = 1,
  LC_STATUS_INVALID_ARGUMENT = 2,
  LC_STATUS_IO = 3,
  LC_STATUS_FORMAT = 4,
  LC_STATUS_SHAPE_MISMATCH = 5,
  LC_STATUS_DEGENERATE = 6,
  LC_STATUS_INTERNAL = 7,
  LC_STATUS_PANIC = 8,
} LcStatus;

// An RGB image in linear light.
typedef struct LcImage LcImage;

// A trained illuminant estimator.
typedef struct LcModel LcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the most recent failure on this thread, or null if none.
// The pointer stays valid until the next failing call on the same thread.
const char *lc_last_error(void);

// Copies `height * width * 3` interleaved RGB floats into a new image.
//
// # Safety
// `data` must point to `height * width * 3` readable floats; `out` must be writable.
enum LcStatus lc_image_new(size_t height, size_t width, const float *data, struct LcImage **out);

// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum LcStatus lc_image_load_pfm(const char *path, struct LcImage **out);

// # Safety
// `image` must be a live handle; `path` a nul-terminated string.
enum LcStatus lc_image_save_pfm(const struct LcImage *image, const char *path);

// Width in pixels, or 0 for a null handle.
//
// # Safety
// `image` must be null or a live handle.
size_t lc_image_width(const struct LcImage *image);

// Height in pixels, or 0 for a null handle.
//
// # Safety
// `image` must be null or a live handle.
size_t lc_image_height(const struct LcImage *image);

// Interleaved RGB pixels, row-major; valid while the handle lives.
//
// # Safety
// `image` must be null or a live handle.
const float *lc_image_data(const struct LcImage *image);

// # Safety
// `image` must be null or a handle not yet freed.
void lc_image_free(struct LcImage *image);

// Angle in degrees between two RGB vectors.
//
// # Safety
// `a` and `b` must point to 3 doubles; `out_degrees` must be writable.
enum LcStatus lc_angular_error(const double *a, const double *b, double *out_degrees);

// Classical estimate with derivative order `order` (0 or 1), Minkowski norm
// `p` (infinite or `<= 0` selects the maximum) and blur `sigma`.
//
// # Safety
// `image` must be a live handle; `out_rgb` must point to 3 writable doubles.
enum LcStatus lc_estimate_classic(const struct LcImage *image,
                                  uint32_t order,
                                  double p,
                                  double sigma,
                                  double *out_rgb);

// Applies the brightness curve with weights `theta[0..len]` to a new image.
//
// # Safety
// `image` must be a live handle; `theta` must point to `len` doubles.
enum LcStatus lc_curve_apply(const struct LcImage *image,
                             const double *theta,
                             size_t len,
                             struct LcImage **out);

// Loads a checkpoint manifest (the `.json` file written by training).
//
// # Safety
// `path` must be a nul-terminated string; `out` must be writable.
enum LcStatus lc_model_load(const char *path, struct LcModel **out);

// Illuminant estimate; the image is area-resized to the model input if needed.
//
// # Safety
// `model` and `image` must be live handles; `out_rgb` must point to 3 writable doubles.
enum LcStatus lc_model_predict(const struct LcModel *model,
                               const struct LcImage *image,
                               double *out_rgb);

// # Safety
// `model` must be null or a handle not yet freed.
void lc_model_free(struct LcModel *model);

// One adversarial brightness step against `model`. `label` may be null, in
// which case the gray-world estimate is used. The curve has `theta_len`
// segments and its weights are written to `out_theta`.
//
// # Safety
// Handles must be live; `label` null or 3 doubles; `out_theta` must hold
// `theta_len` doubles; `out` must be writable.
enum LcStatus lc_augment_image(const struct LcModel *model,
                               const struct LcImage *image,
                               const double *label,
                               uint64_t seed,
                               struct LcImage **out,
                               double *out_theta,
                               size_t theta_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LUMACURVE_H */
