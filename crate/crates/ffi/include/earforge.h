#ifndef EARFORGE_H
#define EARFORGE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EfStatus {
  EF_STATUS_OK = 0,
  EF_STATUS_NULL_POINTER = 1,
  EF_STATUS_INVALID_ARGUMENT = 2,
  EF_STATUS_IO = 3,
  EF_STATUS_PARSE = 4,
  EF_STATUS_DEGENERATE = 5,
  EF_STATUS_MISMATCH = 6,
  EF_STATUS_MISSING_ARTIFACT = 7,
  EF_STATUS_CONFIG = 8,
  EF_STATUS_STAGE_FAILURE = 9,
  EF_STATUS_INTERNAL = 10,
  EF_STATUS_PANIC = 11,
  EF_STATUS_BUFFER_TOO_SMALL = 12,
} EfStatus;

/**
 * Opaque feature vector.
 */
typedef struct EfDescriptor EfDescriptor;

/**
 * Opaque grayscale image.
 */
typedef struct EfImage EfImage;

/**
 * Opaque 55-point landmark set.
 */
typedef struct EfLandmarks EfLandmarks;

/**
 * Opaque dataset manifest.
 */
typedef struct EfManifest EfManifest;

/**
 * Summary metrics of a pipeline run.
 */
typedef struct EfReport {
  double rank1;
  double rank5;
  double eer;
  double auc;
} EfReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *ef_last_error(void);

const char *ef_version(void);

/**
 * Copy `width * height` row-major floats into a new image.
 *
 * # Safety
 * `data` must point to `width * height` floats; `out` must be writable.
 */
enum EfStatus ef_image_new(size_t width, size_t height, const float *data, struct EfImage **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum EfStatus ef_image_load(const char *path, struct EfImage **out);

/**
 * # Safety
 * `img` must be a live handle or null.
 */
size_t ef_image_width(const struct EfImage *img);

/**
 * # Safety
 * `img` must be a live handle or null.
 */
size_t ef_image_height(const struct EfImage *img);

/**
 * Copy pixels into `buf`, which holds `len` floats.
 *
 * # Safety
 * `img` must be a live handle; `buf` must hold `len` floats.
 */
enum EfStatus ef_image_pixels(const struct EfImage *img, float *buf, size_t len);

/**
 * # Safety
 * `img` must come from this library and not be used afterwards.
 */
void ef_image_free(struct EfImage *img);

/**
 * Mirror an image left to right.
 *
 * # Safety
 * `img` must be a live handle; `out` must be writable.
 */
enum EfStatus ef_image_flip(const struct EfImage *img, struct EfImage **out);

/**
 * Landmarks from `count` interleaved `x, y` pairs.
 *
 * # Safety
 * `xy` must point to `2 * count` doubles; `out` must be writable.
 */
enum EfStatus ef_landmarks_new(const double *xy, size_t count, struct EfLandmarks **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum EfStatus ef_landmarks_load(const char *path, struct EfLandmarks **out);

/**
 * # Safety
 * `lm` must come from this library and not be used afterwards.
 */
void ef_landmarks_free(struct EfLandmarks *lm);

/**
 * Geometric normalization to a 128x128 ear.
 *
 * # Safety
 * `img` and `lm` must be live handles; `out` must be writable.
 */
enum EfStatus ef_normalize(const struct EfImage *img,
                           const struct EfLandmarks *lm,
                           struct EfImage **out);

/**
 * Handcrafted descriptor by name (`lbp`, `hog`, ...). BSIF uses a seeded
 * random filter bank since no learned bank crosses this boundary.
 *
 * # Safety
 * `kind` must be a NUL-terminated string; `img` a live handle; `out` writable.
 */
enum EfStatus ef_extract(const char *kind, const struct EfImage *img, struct EfDescriptor **out);

/**
 * # Safety
 * `d` must be a live handle or null.
 */
size_t ef_descriptor_len(const struct EfDescriptor *d);

/**
 * # Safety
 * `d` must be a live handle; `buf` must hold `len` doubles.
 */
enum EfStatus ef_descriptor_values(const struct EfDescriptor *d, double *buf, size_t len);

/**
 * # Safety
 * `d` must come from this library and not be used afterwards.
 */
void ef_descriptor_free(struct EfDescriptor *d);

/**
 * Distance under the descriptors' shared metric; lower is more similar.
 *
 * # Safety
 * `a` and `b` must be live handles; `out` must be writable.
 */
enum EfStatus ef_distance(const struct EfDescriptor *a, const struct EfDescriptor *b, double *out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum EfStatus ef_manifest_load(const char *path, struct EfManifest **out);

/**
 * # Safety
 * `m` must be a live handle or null.
 */
size_t ef_manifest_len(const struct EfManifest *m);

/**
 * # Safety
 * `m` must come from this library and not be used afterwards.
 */
void ef_manifest_free(struct EfManifest *m);

/**
 * Run the pipeline with a JSON configuration. `report` may be null; it is
 * left untouched when the configuration stops before evaluation.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `m` a live handle.
 */
enum EfStatus ef_pipeline_run(const char *config_json,
                              const struct EfManifest *m,
                              struct EfReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EARFORGE_H */
