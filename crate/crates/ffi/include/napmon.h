/* SPDX-License-Identifier: Apache-2.0 */

#ifndef NAPMON_H
#define NAPMON_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum NapmonStatus {
  NAPMON_STATUS_OK = 0,
  NAPMON_STATUS_NULL_POINTER = 1,
  NAPMON_STATUS_INVALID_ARGUMENT = 2,
  NAPMON_STATUS_LENGTH_MISMATCH = 3,
  NAPMON_STATUS_IO = 4,
  NAPMON_STATUS_FORMAT = 5,
  NAPMON_STATUS_NOT_FOUND = 6,
  NAPMON_STATUS_PANIC = 7,
} NapmonStatus;

// A loaded monitor bundle.
typedef struct NapmonMonitor NapmonMonitor;

// A loaded pattern store.
typedef struct NapmonStore NapmonStore;

// Outcome of [`napmon_monitor_judge`].
typedef struct NapmonVerdict {
  bool is_ood;
  // False under majority voting, which has no score.
  bool has_score;
  double score;
} NapmonVerdict;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *napmon_version(void);

// Message of the last failed call on this thread, or NULL after a success.
// The pointer stays valid until the next call into this library on the
// same thread.
const char *napmon_last_error_message(void);

// Loads a NAPS store file into a new handle.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum NapmonStatus napmon_store_load(const char *path, struct NapmonStore **out);

// Builds a store from `count` packed patterns of `bit_len` bits laid out
// back to back, each `ceil(bit_len / 64)` words long.
//
// # Safety
// `words` must point to `count * ceil(bit_len / 64)` readable words; `out`
// must be writable.
enum NapmonStatus napmon_store_build(const uint64_t *words,
                                     size_t count,
                                     size_t bit_len,
                                     struct NapmonStore **out);

// Writes the store as a NAPS file.
//
// # Safety
// `store` must be a live handle; `path` a NUL-terminated string.
enum NapmonStatus napmon_store_save(const struct NapmonStore *store, const char *path);

// Releases a store handle. NULL is ignored.
//
// # Safety
// `store` must be NULL or a handle not yet freed.
void napmon_store_free(struct NapmonStore *store);

// Number of distinct patterns.
//
// # Safety
// `store` must be a live handle; `out` writable.
enum NapmonStatus napmon_store_len(const struct NapmonStore *store, size_t *out);

// Pattern length in bits.
//
// # Safety
// `store` must be a live handle; `out` writable.
enum NapmonStatus napmon_store_bit_len(const struct NapmonStore *store, size_t *out);

// Minimum Hamming distance from a packed query to the store, with the
// lowest index attaining it.
//
// # Safety
// `store` must be a live handle; `words` must point to `word_count`
// readable words; `out_distance` and `out_index` writable.
enum NapmonStatus napmon_store_nearest(const struct NapmonStore *store,
                                       const uint64_t *words,
                                       size_t word_count,
                                       uint32_t *out_distance,
                                       size_t *out_index);

// Hamming distance between two packed patterns of `word_count` words.
//
// # Safety
// `a` and `b` must each point to `word_count` readable words; `out` writable.
enum NapmonStatus napmon_hamming(const uint64_t *a,
                                 const uint64_t *b,
                                 size_t word_count,
                                 uint32_t *out);

// Loads a monitor bundle directory into a new handle.
//
// # Safety
// `dir` must be a NUL-terminated string; `out` must be writable.
enum NapmonStatus napmon_monitor_load(const char *dir, struct NapmonMonitor **out);

// Releases a monitor handle. NULL is ignored.
//
// # Safety
// `monitor` must be NULL or a handle not yet freed.
void napmon_monitor_free(struct NapmonMonitor *monitor);

// Number of monitored layers (`k`).
//
// # Safety
// `monitor` must be a live handle; `out` writable.
enum NapmonStatus napmon_monitor_layer_count(const struct NapmonMonitor *monitor, size_t *out);

// Name and expected value count of monitored layer `index`. The name
// pointer lives as long as the handle.
//
// # Safety
// `monitor` must be a live handle; `out_name` and `out_len` writable.
enum NapmonStatus napmon_monitor_layer(const struct NapmonMonitor *monitor,
                                       size_t index,
                                       const char **out_name,
                                       size_t *out_len);

// Judges one sample. `values[i]` holds `lens[i]` activations of monitored
// layer `i`, in the order reported by [`napmon_monitor_layer`].
// `out_distances` may be NULL; otherwise it receives `layer_count`
// per-layer nearest distances.
//
// # Safety
// `values` and `lens` must point to `layer_count` entries, each
// `values[i]` to `lens[i]` readable floats; `out` writable.
enum NapmonStatus napmon_monitor_judge(const struct NapmonMonitor *monitor,
                                       const float *const *values,
                                       const size_t *lens,
                                       size_t layer_count,
                                       struct NapmonVerdict *out,
                                       uint32_t *out_distances);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NAPMON_H */
