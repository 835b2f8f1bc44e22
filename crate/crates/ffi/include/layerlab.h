/* layerlab C ABI: layered-image compositing, degradations, flow interpolants, and metrics. */

#ifndef LAYERLAB_H
#define LAYERLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum LlabStatus {
  LLAB_STATUS_OK = 0,
  LLAB_STATUS_NULL_POINTER = 1,
  LLAB_STATUS_INVALID_ARGUMENT = 2,
  LLAB_STATUS_DIMENSION_MISMATCH = 3,
  LLAB_STATUS_IO = 4,
  LLAB_STATUS_INTERNAL = 5,
} LlabStatus;

// Opaque RGB image handle.
typedef struct LlabImage LlabImage;

// Opaque alpha-matte handle.
typedef struct LlabMask LlabMask;

// Opaque layered-sample handle.
typedef struct LlabSample LlabSample;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread; empty when no call
// has failed yet. The pointer stays valid until the next failing call.
const char *llab_last_error(void);

// Builds an image from `height * width * 3` interleaved RGB doubles.
//
// # Safety
// `data` must point to `height * width * 3` readable doubles and `out`
// must be a valid destination for one pointer.
enum LlabStatus llab_image_new(size_t height,
                               size_t width,
                               const double *data,
                               struct LlabImage **out);

// # Safety
// `image` must be null or a pointer returned by this library and not yet
// freed.
void llab_image_free(struct LlabImage *image);

// # Safety
// `image` must be a valid handle or null (returns 0).
size_t llab_image_height(const struct LlabImage *image);

// # Safety
// `image` must be a valid handle or null (returns 0).
size_t llab_image_width(const struct LlabImage *image);

// Copies the interleaved RGB payload into `out` (`len` doubles, which must
// equal `height * width * 3`).
//
// # Safety
// `image` must be a valid handle and `out` writable for `len` doubles.
enum LlabStatus llab_image_copy_data(const struct LlabImage *image, double *out, size_t len);

// Builds a matte from `height * width` doubles in `[0, 1]`.
//
// # Safety
// `data` must point to `height * width` readable doubles; `out` must be a
// valid destination.
enum LlabStatus llab_mask_new(size_t height,
                              size_t width,
                              const double *data,
                              struct LlabMask **out);

// # Safety
// `mask` must be null or an unfreed handle from this library.
void llab_mask_free(struct LlabMask *mask);

// # Safety
// `mask` must be a valid handle and `out` writable for `len` doubles.
enum LlabStatus llab_mask_copy_data(const struct LlabMask *mask, double *out, size_t len);

// Straight-alpha blend of (rgb, alpha) over `under`.
//
// # Safety
// All handles must be valid; `out` must be a valid destination.
enum LlabStatus llab_alpha_over(const struct LlabImage *rgb,
                                const struct LlabMask *alpha,
                                const struct LlabImage *under,
                                struct LlabImage **out);

// Stacks `layer_count` (rgb, alpha) pairs, ordered front-to-back, over a
// background.
//
// # Safety
// `layer_rgbs` and `layer_alphas` must each point to `layer_count` valid
// handles; `background` and `out` must be valid.
enum LlabStatus llab_composite(const struct LlabImage *background,
                               const struct LlabImage *const *layer_rgbs,
                               const struct LlabMask *const *layer_alphas,
                               size_t layer_count,
                               struct LlabImage **out);

// Renders `x` over a white canvas through `alpha`.
//
// # Safety
// All handles must be valid; `out` must be a valid destination.
enum LlabStatus llab_composite_on_white(const struct LlabMask *alpha,
                                        const struct LlabImage *x,
                                        struct LlabImage **out);

// Writes the signed residual `source - recomposed` into `out`
// (`height * width * 3` doubles).
//
// # Safety
// Handles must be valid; `out` must be writable for `len` doubles.
enum LlabStatus llab_shadow_residual(const struct LlabImage *source,
                                     const struct LlabImage *recomposed,
                                     double *out,
                                     size_t len);

// Adds a signed shadow residual (`height * width * 3` doubles in
// `[-1, 1]`) back onto a recomposed image. `clamped` (optional) reports
// whether any value left `[0, 1]`.
//
// # Safety
// `recomposed` must be valid; `shadow` must point to `len` readable
// doubles matching the image payload; `out` must be a valid destination.
enum LlabStatus llab_recompose(const struct LlabImage *recomposed,
                               const double *shadow,
                               size_t len,
                               struct LlabImage **out,
                               bool *clamped);

// Disk erosion of a matte.
//
// # Safety
// `mask` must be valid; `out` must be a valid destination.
enum LlabStatus llab_erode(const struct LlabMask *mask, size_t radius, struct LlabMask **out);

// Disk dilation of a matte.
//
// # Safety
// `mask` must be valid; `out` must be a valid destination.
enum LlabStatus llab_dilate(const struct LlabMask *mask, size_t radius, struct LlabMask **out);

// Gaussian boundary blur of a matte.
//
// # Safety
// `mask` must be valid; `out` must be a valid destination.
enum LlabStatus llab_blur(const struct LlabMask *mask, double sigma, struct LlabMask **out);

// Soft IoU of two mattes.
//
// # Safety
// Handles must be valid; `out` must be writable.
enum LlabStatus llab_alpha_soft_iou(const struct LlabMask *a,
                                    const struct LlabMask *b,
                                    double *out);

// White-rendered RGB L1 between two (rgb, alpha) layers.
//
// # Safety
// Handles must be valid; `out` must be writable.
enum LlabStatus llab_rgb_l1(const struct LlabImage *pred_rgb,
                            const struct LlabMask *pred_alpha,
                            const struct LlabImage *gt_rgb,
                            const struct LlabMask *gt_alpha,
                            double *out);

// Main-path interpolant `z_t = (1-t)*eps + t*x0` over flat buffers.
//
// # Safety
// `x0` and `eps` must each point to `len` readable doubles; `out` must be
// writable for `len`.
enum LlabStatus llab_interpolate(const double *x0,
                                 const double *eps,
                                 size_t len,
                                 double t,
                                 double *out);

// Auxiliary-path interpolant `z_t = (1-t)*(x_d + eps) + t*x0`.
//
// # Safety
// `x0`, `xd`, and `eps` must each point to `len` readable doubles; `out`
// must be writable for `len`.
enum LlabStatus llab_interpolate_aux(const double *x0,
                                     const double *xd,
                                     const double *eps,
                                     size_t len,
                                     double t,
                                     double *out);

// Loads a stored sample from its `manifest.json` path.
//
// # Safety
// `manifest_path` must be a NUL-terminated UTF-8 path; `out` must be a
// valid destination.
enum LlabStatus llab_sample_read(const char *manifest_path, struct LlabSample **out);

// # Safety
// `sample` must be null or an unfreed handle from this library.
void llab_sample_free(struct LlabSample *sample);

// # Safety
// `sample` must be a valid handle or null (returns 0).
size_t llab_sample_layer_count(const struct LlabSample *sample);

// # Safety
// `sample` must be a valid handle or null (returns 0).
size_t llab_sample_height(const struct LlabSample *sample);

// # Safety
// `sample` must be a valid handle or null (returns 0).
size_t llab_sample_width(const struct LlabSample *sample);

// Recomposes a sample's stack (background plus layers, without the shadow
// residual).
//
// # Safety
// `sample` must be valid; `out` must be a valid destination.
enum LlabStatus llab_sample_composite(const struct LlabSample *sample, struct LlabImage **out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* LAYERLAB_H */
