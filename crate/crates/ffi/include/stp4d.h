#ifndef STP4D_H
#define STP4D_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Number of attributes stored per Gaussian.
 */
#define STP4D_ATTRIBUTES 14

typedef enum Stp4dStatus {
  STP4D_STATUS_OK = 0,
  STP4D_STATUS_NULL_POINTER = 1,
  STP4D_STATUS_INVALID_ARGUMENT = 2,
  STP4D_STATUS_CONFIG = 3,
  STP4D_STATUS_DIMENSION = 4,
  STP4D_STATUS_CHECKPOINT = 5,
  STP4D_STATUS_IO = 6,
  STP4D_STATUS_PARSE = 7,
  STP4D_STATUS_NON_FINITE = 8,
  STP4D_STATUS_BUFFER_TOO_SMALL = 9,
  STP4D_STATUS_INTERNAL = 10,
  STP4D_STATUS_PANIC = 11,
} Stp4dStatus;

/**
 * A generated sequence of Gaussian frames.
 */
typedef struct Stp4dAsset Stp4dAsset;

/**
 * A configured model with loaded parameters.
 */
typedef struct Stp4dPipeline Stp4dPipeline;

/**
 * Pinhole camera. `r` is the row-major world-to-camera rotation.
 */
typedef struct Stp4dCamera {
  double fx;
  double fy;
  double cx;
  double cy;
  double r[9];
  double t[3];
  size_t width;
  size_t height;
} Stp4dCamera;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call on the same thread.
 */
const char *stp4d_last_error(void);

/**
 * One deterministic DDIM update applied elementwise over `len` values.
 *
 * # Safety
 * `x_t`, `x0` and `out` must point to `len` doubles. `out` may alias `x_t`.
 */
enum Stp4dStatus stp4d_ddim_step(double alpha_bar_t,
                                 double alpha_bar_prev,
                                 const double *x_t,
                                 const double *x0,
                                 size_t len,
                                 double *out);

/**
 * Loads a pipeline config and, when `checkpoint` is non-null, its trained
 * parameters.
 *
 * # Safety
 * String arguments must be null or NUL-terminated; `out` must be writable.
 */
enum Stp4dStatus stp4d_pipeline_open(const char *config,
                                     const char *checkpoint,
                                     struct Stp4dPipeline **out);

/**
 * # Safety
 * `pipeline` must come from [`stp4d_pipeline_open`] and not be freed twice.
 */
void stp4d_pipeline_free(struct Stp4dPipeline *pipeline);

/**
 * Generates an asset for `prompt`. Deterministic in (parameters, prompt, seed).
 *
 * # Safety
 * `pipeline` must be a live handle, `prompt` NUL-terminated, `out` writable.
 */
enum Stp4dStatus stp4d_generate(const struct Stp4dPipeline *pipeline,
                                const char *prompt,
                                uint64_t seed,
                                struct Stp4dAsset **out);

/**
 * # Safety
 * `asset` must come from [`stp4d_generate`] and not be freed twice.
 */
void stp4d_asset_free(struct Stp4dAsset *asset);

/**
 * # Safety
 * `asset` must be a live handle or null (gives 0).
 */
size_t stp4d_asset_frames(const struct Stp4dAsset *asset);

/**
 * # Safety
 * `asset` must be a live handle or null (gives 0).
 */
size_t stp4d_asset_gaussians(const struct Stp4dAsset *asset);

/**
 * Copies the activated attributes of `frame` (`gaussians × STP4D_ATTRIBUTES`,
 * row-major) into `out`.
 *
 * # Safety
 * `asset` must be a live handle and `out` must hold `out_len` doubles.
 */
enum Stp4dStatus stp4d_asset_copy_frame(const struct Stp4dAsset *asset,
                                        size_t frame,
                                        double *out,
                                        size_t out_len);

/**
 * Writes `frame_NNNN.ply` files for every frame into `dir`.
 *
 * # Safety
 * `asset` must be a live handle and `dir` NUL-terminated.
 */
enum Stp4dStatus stp4d_asset_write_ply(const struct Stp4dAsset *asset, const char *dir);

/**
 * Renders one frame of an asset to `height × width × 3` RGB values in [0, 1].
 *
 * # Safety
 * Pointers must be valid; `background` points to 3 doubles.
 */
enum Stp4dStatus stp4d_asset_render(const struct Stp4dAsset *asset,
                                    size_t frame,
                                    const struct Stp4dCamera *camera,
                                    const double *background,
                                    double *out,
                                    size_t out_len);

/**
 * Renders a PLY frame file to `height × width × 3` RGB values in [0, 1].
 *
 * # Safety
 * Pointers must be valid; `background` points to 3 doubles.
 */
enum Stp4dStatus stp4d_render_ply(const char *path,
                                  const struct Stp4dCamera *camera,
                                  const double *background,
                                  double *out,
                                  size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STP4D_H */
