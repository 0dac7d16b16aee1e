#ifndef RPGAN_H
#define RPGAN_H

/* Generated by cbindgen from rpgan-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum RpganStatus {
  RPGAN_STATUS_OK = 0,
  RPGAN_STATUS_NULL_ARGUMENT = 1,
  RPGAN_STATUS_UTF8 = 2,
  RPGAN_STATUS_IO = 3,
  RPGAN_STATUS_FORMAT = 4,
  RPGAN_STATUS_CONTRACT = 5,
  RPGAN_STATUS_BUFFER_TOO_SMALL = 6,
} RpganStatus;

/**
 * Opaque generator handle.
 */
typedef struct RpganGenerator RpganGenerator;

/**
 * Opaque inverter handle.
 */
typedef struct RpganInverter RpganInverter;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent error on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *rpgan_last_error_message(void);

/**
 * Loads the generator from a checkpoint file into a fresh handle.
 *
 * # Safety
 * `path` must point to a NUL-terminated string and `out` to writable
 * storage for one pointer.
 */
enum RpganStatus rpgan_generator_load(const char *path, struct RpganGenerator **out);

/**
 * Releases a generator handle. Null is a no-op.
 *
 * # Safety
 * `handle` must come from [`rpgan_generator_load`] and not be freed twice.
 */
void rpgan_generator_free(struct RpganGenerator *handle);

/**
 * Number of buckets, or 0 on a null handle.
 *
 * # Safety
 * `handle` must be live or null.
 */
uint32_t rpgan_generator_bucket_count(const struct RpganGenerator *handle);

/**
 * Instances in one bucket, or 0 when out of range.
 *
 * # Safety
 * `handle` must be live or null.
 */
uint32_t rpgan_generator_instance_count(const struct RpganGenerator *handle, uint32_t bucket);

/**
 * Scalar count of one generated sample, or 0 on a null/invalid handle.
 *
 * # Safety
 * `handle` must be live or null.
 */
uintptr_t rpgan_generator_output_len(const struct RpganGenerator *handle);

/**
 * Exact route count as a decimal string. Fails with `BufferTooSmall` when
 * `cap` cannot hold the digits plus the terminator.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes.
 */
enum RpganStatus rpgan_generator_latent_cardinality(const struct RpganGenerator *handle,
                                                    char *buf,
                                                    uintptr_t cap);

/**
 * Draws a uniform route from a 64-bit seed. `indices` receives one 0-based
 * instance index per bucket.
 *
 * # Safety
 * `indices` must point to `len` writable u32 slots.
 */
enum RpganStatus rpgan_generator_sample_route(const struct RpganGenerator *handle,
                                              uint64_t seed,
                                              uint32_t *indices,
                                              uintptr_t len);

/**
 * Runs the generator along the given route. `out` receives
 * [`rpgan_generator_output_len`] f32 values in row-major order.
 *
 * # Safety
 * `indices` must hold `n_indices` readable u32 values and `out` must hold
 * `out_len` writable f32 slots.
 */
enum RpganStatus rpgan_generator_forward(const struct RpganGenerator *handle,
                                         const uint32_t *indices,
                                         uintptr_t n_indices,
                                         float *out,
                                         uintptr_t out_len);

/**
 * Loads an inverter checkpoint into a fresh handle.
 *
 * # Safety
 * `path` must point to a NUL-terminated string and `out` to writable
 * storage for one pointer.
 */
enum RpganStatus rpgan_inverter_load(const char *path, struct RpganInverter **out);

/**
 * Releases an inverter handle. Null is a no-op.
 *
 * # Safety
 * `handle` must come from [`rpgan_inverter_load`] and not be freed twice.
 */
void rpgan_inverter_free(struct RpganInverter *handle);

/**
 * Predicts the most likely route for an image (row-major f32 values in the
 * generator's output layout). `indices` receives one 0-based index per
 * bucket.
 *
 * # Safety
 * `image` must hold `image_len` readable f32 values and `indices` must hold
 * `indices_len` writable u32 slots.
 */
enum RpganStatus rpgan_inverter_invert(const struct RpganInverter *handle,
                                       const float *image,
                                       uintptr_t image_len,
                                       uint32_t *indices,
                                       uintptr_t indices_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RPGAN_H */
