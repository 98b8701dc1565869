/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#ifndef TRUS_H
#define TRUS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/*
 Result code of every fallible call.
 */
typedef enum TrusStatus {
  TRUS_STATUS_OK = 0,
  TRUS_STATUS_NULL_POINTER = 1,
  TRUS_STATUS_INVALID_ARGUMENT = 2,
  TRUS_STATUS_SHAPE_MISMATCH = 3,
  TRUS_STATUS_DEGENERATE_VECTOR = 4,
  TRUS_STATUS_INVALID_STRENGTH = 5,
  TRUS_STATUS_NON_UNIT_DIRECTION = 6,
  TRUS_STATUS_NON_FINITE_VALUE = 7,
  /*
   Bad magic, unsupported version, truncated payload or bad header.
   */
  TRUS_STATUS_FORMAT_ERROR = 8,
  TRUS_STATUS_DUPLICATE_SPEAKER = 9,
  TRUS_STATUS_EMPTY_POOL = 10,
  /*
   A required file or sidecar does not exist.
   */
  TRUS_STATUS_NOT_FOUND = 11,
  TRUS_STATUS_IO_ERROR = 12,
  TRUS_STATUS_VALIDATION_ERROR = 13,
  /*
   Caller-provided buffer is too small; the required size was reported.
   */
  TRUS_STATUS_BUFFER_TOO_SMALL = 14,
  TRUS_STATUS_PANIC = 15,
} TrusStatus;

/*
 Identity prototype handle.
 */
typedef struct TrusPrototype TrusPrototype;

/*
 Opt-out registry handle bound to one directory.
 */
typedef struct TrusRegistry TrusRegistry;

/*
 Activation tape handle.
 */
typedef struct TrusTape TrusTape;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *trus_version(void);

/*
 Message for the last failing call on this thread; empty if none.
 */
const char *trus_last_error_message(void);

/*
 Removes `α (x·s) s` from each of the `rows` frames in `frames`
 (row-major, `rows × cols`). `s` must be unit-norm with `cols` entries.
 */
enum TrusStatus trus_apply_steering(float *frames,
                                    size_t rows,
                                    size_t cols,
                                    const float *direction,
                                    double alpha);

/*
 Writes the unit direction from `prototype` toward `activation` into `out`
 (all of length `channels`).
 */
enum TrusStatus trus_compute_steering_vector(const float *activation,
                                             const float *prototype,
                                             size_t channels,
                                             float *out);

enum TrusStatus trus_cosine_similarity(const float *a, const float *b, size_t len, double *out);

enum TrusStatus trus_tape_read(const char *path, struct TrusTape **out);

enum TrusStatus trus_tape_write(const struct TrusTape *tape, const char *path);

/*
 Copies the header dimensions; any out-pointer may be null.
 */
enum TrusStatus trus_tape_dims(const struct TrusTape *tape,
                               uint32_t *layers,
                               uint32_t *steps,
                               uint32_t *channels,
                               uint32_t *frames);

/*
 Speaker id owned by the tape handle; null if `tape` is null.
 */
const char *trus_tape_speaker_id(const struct TrusTape *tape);

void trus_tape_free(struct TrusTape *tape);

/*
 Averages `count` tapes into a new prototype.
 */
enum TrusStatus trus_prototype_build(const struct TrusTape *const *tapes,
                                     size_t count,
                                     struct TrusPrototype **out);

enum TrusStatus trus_prototype_load(const char *path, struct TrusPrototype **out);

enum TrusStatus trus_prototype_save(const struct TrusPrototype *proto, const char *path);

enum TrusStatus trus_prototype_pool_size(const struct TrusPrototype *proto, size_t *out);

void trus_prototype_free(struct TrusPrototype *proto);

/*
 Opens the registry in `dir`. With `create` false a missing index is
 `TRUS_STATUS_NOT_FOUND`; with `create` true an empty registry is made.
 */
enum TrusStatus trus_registry_open(const char *dir, bool create, struct TrusRegistry **out);

void trus_registry_free(struct TrusRegistry *registry);

enum TrusStatus trus_registry_set_match_threshold(struct TrusRegistry *registry, double threshold);

/*
 Registers `speaker_id`. `created` (optional) is set to false when an
 identical registration already existed.
 */
enum TrusStatus trus_registry_register(struct TrusRegistry *registry,
                                       const char *speaker_id,
                                       const struct TrusTape *reference,
                                       const struct TrusPrototype *proto,
                                       double k,
                                       double alpha,
                                       bool *created);

enum TrusStatus trus_registry_remove(struct TrusRegistry *registry,
                                     const char *speaker_id,
                                     bool *removed);

enum TrusStatus trus_registry_version(const struct TrusRegistry *registry, uint64_t *out);

enum TrusStatus trus_registry_len(const struct TrusRegistry *registry, size_t *out);

/*
 Matches `reference` against the pool. On a match, `*matched` is true
 and the NUL-terminated speaker id is copied into `id_buf`. `id_len`
 (optional) receives the id length without the NUL; if `id_buf_len` is
 too small the call returns `TRUS_STATUS_BUFFER_TOO_SMALL`.
 */
enum TrusStatus trus_registry_match(const struct TrusRegistry *registry,
                                    const struct TrusTape *reference,
                                    bool *matched,
                                    char *id_buf,
                                    size_t id_buf_len,
                                    size_t *id_len);

/*
 Steering data of one record at (`layer`, `step`), both 1-based.

 `masked` tells whether the cell is selected for intervention and
 `present` whether a direction exists there. When present, the direction
 is copied to `direction` (length `channels`, may be null to skip).
 `alpha` receives the stored strength.
 */
enum TrusStatus trus_registry_cell_steering(const struct TrusRegistry *registry,
                                            const char *speaker_id,
                                            uint32_t layer,
                                            uint32_t step,
                                            float *direction,
                                            size_t channels,
                                            bool *masked,
                                            bool *present,
                                            double *alpha);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRUS_H */
