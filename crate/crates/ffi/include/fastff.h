#ifndef FASTFF_H
#define FASTFF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FffStatus {
  FFF_STATUS_OK = 0,
  FFF_STATUS_NULL_POINTER = 1,
  FFF_STATUS_INVALID_ARGUMENT = 2,
  FFF_STATUS_SHAPE = 3,
  FFF_STATUS_NON_FINITE = 4,
  FFF_STATUS_IO = 5,
  FFF_STATUS_FORMAT = 6,
  FFF_STATUS_PANIC = 7,
} FffStatus;

typedef enum FffVariant {
  /**
   * GELU on each node before the output sum.
   */
  FFF_VARIANT_PRE_GELU = 0,
  /**
   * GELU once on the summed output.
   */
  FFF_VARIANT_POST_GELU = 1,
} FffVariant;

/**
 * Opaque layer handle.
 */
typedef struct FffLayer FffLayer;

typedef struct FffDims {
  uint32_t trees;
  uint32_t depth;
  uint32_t d_in;
  uint32_t d_out;
  enum FffVariant variant;
} FffDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a layer with scaled Gaussian initialization.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum FffStatus fff_layer_new(uint32_t trees,
                             uint32_t depth,
                             uint32_t d_in,
                             uint32_t d_out,
                             enum FffVariant variant,
                             uint64_t seed,
                             struct FffLayer **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `layer` must be null or a handle from this library not freed before.
 */
void fff_layer_free(struct FffLayer *layer);

/**
 * Writes the layer's dimensions into `out`.
 *
 * # Safety
 * `layer` must be a live handle and `out` writable.
 */
enum FffStatus fff_layer_dims(const struct FffLayer *layer, struct FffDims *out);

/**
 * Total parameters and parameters touched per input.
 *
 * # Safety
 * `layer` must be a live handle; `total` and `active` writable.
 */
enum FffStatus fff_layer_param_count(const struct FffLayer *layer, size_t *total, size_t *active);

/**
 * Sequential forward: `x` is `batch x d_in` row-major, `y` is
 * `batch x d_out` row-major with `y_len == batch * d_out`.
 *
 * # Safety
 * `x` must hold `batch * d_in` doubles and `y` `y_len` writable doubles.
 */
enum FffStatus fff_layer_forward(const struct FffLayer *layer,
                                 const double *x,
                                 size_t batch,
                                 double *y,
                                 size_t y_len);

/**
 * Mask-based forward; same layout and results as [`fff_layer_forward`]
 * up to rounding.
 *
 * # Safety
 * As for [`fff_layer_forward`].
 */
enum FffStatus fff_layer_forward_masked(const struct FffLayer *layer,
                                        const double *x,
                                        size_t batch,
                                        double *y,
                                        size_t y_len);

/**
 * Leaf slot reached in each tree: `leaves[b * trees + p]`, with
 * `leaves_len == batch * trees`.
 *
 * # Safety
 * `x` must hold `batch * d_in` doubles and `leaves` `leaves_len` writable u32s.
 */
enum FffStatus fff_layer_route(const struct FffLayer *layer,
                               const double *x,
                               size_t batch,
                               uint32_t *leaves,
                               size_t leaves_len);

/**
 * Saves the layer in the `FFF1` format.
 *
 * # Safety
 * `layer` must be a live handle and `path` a NUL-terminated string.
 */
enum FffStatus fff_layer_save(const struct FffLayer *layer, const char *path);

/**
 * Loads an `FFF1` file into a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum FffStatus fff_layer_load(const char *path, struct FffLayer **out);

/**
 * Fraction of a tree's nodes skipped per input: `1 − (D+1)/(2^(D+1)−1)`.
 * Returns NaN for depths above 62.
 */
double fff_mlp_block_sparsity(uint32_t depth);

/**
 * Message for the last failed call on this thread; empty after success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *fff_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fff_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FASTFF_H */
