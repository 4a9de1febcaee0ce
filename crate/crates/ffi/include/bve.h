#ifndef BVE_H
#define BVE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum {
  BVE_STATUS_OK = 0,
  BVE_STATUS_NULL_ARGUMENT = 1,
  BVE_STATUS_INVALID_STRING = 2,
  BVE_STATUS_SHAPE = 3,
  BVE_STATUS_CONFIG = 4,
  BVE_STATUS_DOMAIN = 5,
  BVE_STATUS_EMPTY = 6,
  BVE_STATUS_DEGENERATE = 7,
  BVE_STATUS_REGISTRATION = 8,
  BVE_STATUS_TRAINING = 9,
  BVE_STATUS_NUMERICAL = 10,
  BVE_STATUS_ENCODING = 11,
  BVE_STATUS_GENERATION = 12,
  BVE_STATUS_FORMAT = 13,
  BVE_STATUS_IO = 14,
  BVE_STATUS_JSON = 15,
  BVE_STATUS_PANIC = 16,
} BveStatus;

/**
 * Dense occupancy grid.
 */
typedef struct BveGrid BveGrid;

/**
 * Preservation mask at one resolution.
 */
typedef struct BveMask BveMask;

/**
 * Both trained stages of an edit model.
 */
typedef struct BveModel BveModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *bve_version(void);

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *bve_last_error(void);

/**
 * Reads a BVEG grid file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
BveStatus bve_grid_load(const char *path, BveGrid **out);

/**
 * Writes a grid as BVEG.
 *
 * # Safety
 * `grid` must come from this library; `path` must be NUL-terminated.
 */
BveStatus bve_grid_save(const BveGrid *grid, const char *path);

/**
 * # Safety
 * `grid` must be null or a handle from this library not yet freed.
 */
void bve_grid_free(BveGrid *grid);

/**
 * Edge length in voxels, or 0 for a null handle.
 *
 * # Safety
 * `grid` must be null or a live handle.
 */
size_t bve_grid_resolution(const BveGrid *grid);

/**
 * Number of voxels above the occupancy threshold, or 0 for a null handle.
 *
 * # Safety
 * `grid` must be null or a live handle.
 */
size_t bve_grid_occupied(const BveGrid *grid);

/**
 * Registers `edit` onto `orig` and returns the preservation mask at
 * `resolution` (0 for the grid resolution).
 *
 * # Safety
 * Grid handles must be live; `out` must be writable.
 */
BveStatus bve_mask_build(const BveGrid *orig,
                         const BveGrid *edit,
                         size_t resolution,
                         double tau_voxels,
                         uint64_t seed,
                         BveMask **out);

/**
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
BveStatus bve_mask_load(const char *path, BveMask **out);

/**
 * # Safety
 * `mask` must be live; `path` must be NUL-terminated.
 */
BveStatus bve_mask_save(const BveMask *mask, const char *path);

/**
 * Number of preserved voxels, or 0 for a null handle.
 *
 * # Safety
 * `mask` must be null or a live handle.
 */
size_t bve_mask_count(const BveMask *mask);

/**
 * Intersection over union of two masks at the same resolution.
 *
 * # Safety
 * Mask handles must be live; `out` must be writable.
 */
BveStatus bve_mask_iou(const BveMask *a, const BveMask *b, double *out);

/**
 * # Safety
 * `mask` must be null or a handle not yet freed.
 */
void bve_mask_free(BveMask *mask);

/**
 * Loads both trained stages from a run directory written by `bve train`.
 *
 * # Safety
 * `run_dir` must be NUL-terminated; `out` must be writable.
 */
BveStatus bve_model_load(const char *run_dir, BveModel **out);

/**
 * Samples an edited structure for `orig` under `instruction`; the result is
 * a new grid handle.
 *
 * # Safety
 * Handles must be live; `instruction` must be NUL-terminated; `out` must be
 * writable.
 */
BveStatus bve_model_edit(const BveModel *model,
                         const BveGrid *orig,
                         const char *instruction,
                         size_t steps,
                         double cfg_scale,
                         uint64_t seed,
                         BveGrid **out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void bve_model_free(BveModel *model);

/**
 * Chamfer distance between the occupied voxel centres of two grids, each
 * subsampled to at most `points` (0 for all).
 *
 * # Safety
 * Grid handles must be live; `out` must be writable.
 */
BveStatus bve_chamfer(const BveGrid *a,
                      const BveGrid *b,
                      size_t points,
                      uint64_t seed,
                      double *out);

/**
 * Mean SSIM of the three axis projections of two grids.
 *
 * # Safety
 * Grid handles must be live; `out` must be writable.
 */
BveStatus bve_projection_ssim(const BveGrid *a, const BveGrid *b, double *out);

/**
 * Fréchet distance between Gaussian fits of two row-major feature matrices
 * with the same column count.
 *
 * # Safety
 * `real` must point to `real_rows × cols` doubles, `gen` to `gen_rows × cols`;
 * `out` must be writable.
 */
BveStatus bve_frechet(const double *real,
                      size_t real_rows,
                      const double *gen,
                      size_t gen_rows,
                      size_t cols,
                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BVE_H */
