#ifndef BINDGEOM_H
#define BINDGEOM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BgStatus {
  BG_STATUS_OK = 0,
  BG_STATUS_NULL_POINTER = 1,
  BG_STATUS_INVALID_ARGUMENT = 2,
  BG_STATUS_IO = 3,
  /**
   * Malformed EMBX bytes or annotation JSON.
   */
  BG_STATUS_FORMAT = 4,
  /**
   * Prompt outside the template grammar or lexicon.
   */
  BG_STATUS_PARSE = 5,
  BG_STATUS_SHAPE = 6,
  /**
   * Near-singular input, non-finite loss or a similar numerical failure.
   */
  BG_STATUS_NUMERICAL = 7,
  BG_STATUS_INTERNAL = 8,
} BgStatus;

typedef enum BgMode {
  BG_MODE_CAUSAL = 0,
  BG_MODE_NON_CAUSAL = 1,
} BgMode;

/**
 * Opaque prompt annotation.
 */
typedef struct BgAnnotation BgAnnotation;

/**
 * Opaque row-major `f64` matrix.
 */
typedef struct BgMatrix BgMatrix;

typedef struct BgLoss {
  double ent;
  double bhat;
  double total;
} BgLoss;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failing call on this thread; empty if none. Valid
 * until the next failing call on the same thread. Do not free.
 */
const char *bg_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *bg_version(void);

/**
 * Copies `rows * cols` row-major values from `data` into a new matrix.
 *
 * # Safety
 * `data` must point to `rows * cols` readable doubles (may be NULL when that
 * product is 0); `out` must be a valid pointer.
 */
enum BgStatus bg_matrix_new(size_t rows, size_t cols, const double *data, struct BgMatrix **out);

/**
 * # Safety
 * `m` must be NULL or a handle from this library not yet freed.
 */
void bg_matrix_free(struct BgMatrix *m);

/**
 * Rows of `m`, or 0 for NULL.
 *
 * # Safety
 * `m` must be NULL or a live handle.
 */
size_t bg_matrix_rows(const struct BgMatrix *m);

/**
 * Columns of `m`, or 0 for NULL.
 *
 * # Safety
 * `m` must be NULL or a live handle.
 */
size_t bg_matrix_cols(const struct BgMatrix *m);

/**
 * Borrowed pointer to the row-major data, valid while `m` lives.
 *
 * # Safety
 * `m` must be NULL or a live handle.
 */
const double *bg_matrix_data(const struct BgMatrix *m);

/**
 * Decodes EMBX bytes. `out_dtype` (optional) receives 0 for f32, 1 for f64.
 *
 * # Safety
 * `bytes` must point to `len` readable bytes; `out` must be valid;
 * `out_dtype` may be NULL.
 */
enum BgStatus bg_embx_read(const uint8_t *bytes,
                           size_t len,
                           struct BgMatrix **out,
                           uint8_t *out_dtype);

/**
 * Encodes `m` with `dtype` (0 = f32, 1 = f64) into a new buffer that the
 * caller releases with `bg_bytes_free`.
 *
 * # Safety
 * `m` must be a live handle; `out_bytes` and `out_len` must be valid.
 */
enum BgStatus bg_embx_write(const struct BgMatrix *m,
                            uint8_t dtype,
                            uint8_t **out_bytes,
                            size_t *out_len);

/**
 * # Safety
 * `bytes`/`len` must come from `bg_embx_write`, or `bytes` must be NULL.
 */
void bg_bytes_free(uint8_t *bytes, size_t len);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` valid; `out_dtype` may be NULL.
 */
enum BgStatus bg_embx_load(const char *path, struct BgMatrix **out, uint8_t *out_dtype);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `m` a live handle.
 */
enum BgStatus bg_embx_save(const char *path, const struct BgMatrix *m, uint8_t dtype);

/**
 * Parses a template prompt with the built-in lexicon. With `rows > 0` the
 * annotation spans `rows` embedding rows, the extras being EOT then PAD.
 *
 * # Safety
 * `prompt` must be a NUL-terminated string; `out` valid.
 */
enum BgStatus bg_parse_prompt(const char *prompt, size_t rows, struct BgAnnotation **out);

/**
 * Loads an annotation from its JSON document.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` valid.
 */
enum BgStatus bg_annotation_load(const char *json, struct BgAnnotation **out);

/**
 * JSON document for `a`; release with `bg_string_free`. NULL on NULL input.
 *
 * # Safety
 * `a` must be NULL or a live handle.
 */
char *bg_annotation_to_json(const struct BgAnnotation *a);

/**
 * # Safety
 * `a` must be NULL or a live handle.
 */
size_t bg_annotation_token_count(const struct BgAnnotation *a);

/**
 * # Safety
 * `a` must be NULL or a live handle.
 */
size_t bg_annotation_np_count(const struct BgAnnotation *a);

/**
 * Object token index of noun phrase `np`.
 *
 * # Safety
 * `a` must be a live handle; `out` valid.
 */
enum BgStatus bg_annotation_object_index(const struct BgAnnotation *a, size_t np, size_t *out);

/**
 * # Safety
 * `a` must be NULL or a live handle not yet freed.
 */
void bg_annotation_free(struct BgAnnotation *a);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library.
 */
void bg_string_free(char *s);

/**
 * Projection-out of noun-phrase tokens. `strict_complement` only affects
 * causal mode.
 *
 * # Safety
 * `t` and `a` must be live handles; `out` valid.
 */
enum BgStatus bg_apply_capo(const struct BgMatrix *t,
                            const struct BgAnnotation *a,
                            enum BgMode mode,
                            bool strict_complement,
                            struct BgMatrix **out);

/**
 * Row-softmax attention `P` (N×L) and its column normalisation `A`. Either
 * output pointer may be NULL to skip it.
 *
 * # Safety
 * All handles must be live; output pointers valid or NULL.
 */
enum BgStatus bg_cross_attention(const struct BgMatrix *h,
                                 const struct BgMatrix *t,
                                 const struct BgMatrix *wq,
                                 const struct BgMatrix *wk,
                                 const struct BgMatrix *wv,
                                 struct BgMatrix **out_p,
                                 struct BgMatrix **out_a);

/**
 * Entropy over object maps plus `lambda` times the inter-NP Bhattacharyya sum.
 *
 * # Safety
 * All handles must be live; `out` valid.
 */
enum BgStatus bg_total_loss(const struct BgMatrix *h,
                            const struct BgMatrix *t,
                            const struct BgMatrix *wq,
                            const struct BgMatrix *wk,
                            const struct BgMatrix *wv,
                            const struct BgAnnotation *a,
                            double lambda,
                            struct BgLoss *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BINDGEOM_H */
