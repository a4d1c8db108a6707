#ifndef CFL_H
#define CFL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CflMode {
  CFL_MODE_COMPOSED = 0,
  CFL_MODE_LITERAL = 1,
} CflMode;

typedef enum CflStatus {
  CFL_STATUS_OK = 0,
  CFL_STATUS_NULL_POINTER = 1,
  CFL_STATUS_INVALID_ARGUMENT = 2,
  CFL_STATUS_SHAPE = 3,
  CFL_STATUS_NON_FINITE = 4,
  CFL_STATUS_CONFIG = 5,
  CFL_STATUS_FORMAT = 6,
  CFL_STATUS_IO = 7,
  CFL_STATUS_BUFFER_TOO_SMALL = 8,
  CFL_STATUS_NOT_LIPSCHITZ = 9,
  CFL_STATUS_PANIC = 10,
} CflStatus;

// Opaque model handle.
typedef struct CflModel CflModel;

typedef struct CflDims {
  // Input width, or vocabulary size for a transformer.
  size_t d_in;
  size_t d_h;
  size_t d_y;
  size_t layers;
  // 1 when the model consumes token ids.
  int32_t tokens;
} CflDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message on this thread, or NULL. Valid until the next call.
const char *cfl_last_error(void);

// Library version as a static NUL-terminated string.
const char *cfl_version(void);

// Builds a freshly initialized model from a JSON model spec.
//
// # Safety
// `spec_json` must be NUL-terminated; `out` must be writable.
enum CflStatus cfl_model_new(const char *spec_json, struct CflModel **out);

// # Safety
// `path` must be NUL-terminated; `out` must be writable.
enum CflStatus cfl_model_load(const char *path, struct CflModel **out);

// # Safety
// `model` must come from this library; `path` must be NUL-terminated.
enum CflStatus cfl_model_save(const struct CflModel *model, const char *path);

// Releases a handle. NULL is ignored.
//
// # Safety
// `model` must come from this library and not be used afterwards.
void cfl_model_free(struct CflModel *model);

// # Safety
// `model` must come from this library; `out` must be writable.
enum CflStatus cfl_model_dims(const struct CflModel *model, struct CflDims *out);

// Runs `t` refinement iterations on a row-major `rows × cols` input and
// writes the final `rows × d_y` output.
//
// # Safety
// `x` must hold `rows * cols` values and `out` `out_len` values.
enum CflStatus cfl_refine(const struct CflModel *model,
                          const double *x,
                          size_t rows,
                          size_t cols,
                          size_t t,
                          enum CflMode mode,
                          double *out,
                          size_t out_len);

// Refinement of one token sequence; writes the pooled `d_y` logits.
//
// # Safety
// `tokens` must hold `len` ids and `out` `out_len` values.
enum CflStatus cfl_refine_tokens(const struct CflModel *model,
                                 const size_t *tokens,
                                 size_t len,
                                 size_t t,
                                 enum CflMode mode,
                                 double *out,
                                 size_t out_len);

// Refines until the output delta drops below `eps` or `t_max` iterations
// ran; `iterations` receives the count used.
//
// # Safety
// As [`cfl_refine`]; `iterations` must be writable.
enum CflStatus cfl_refine_early_exit(const struct CflModel *model,
                                     const double *x,
                                     size_t rows,
                                     size_t cols,
                                     size_t t_max,
                                     double eps,
                                     enum CflMode mode,
                                     double *out,
                                     size_t out_len,
                                     size_t *iterations);

// Upper bound on the Lipschitz constant of one refinement step
// (infinity for FiLM adapters).
//
// # Safety
// `model` must come from this library; `out` must be writable.
enum CflStatus cfl_lipschitz_bound(const struct CflModel *model, double *out);

// Returns a new handle whose loop weights are scaled so the bound is at
// most `c`.
//
// # Safety
// `model` must come from this library; `out` must be writable.
enum CflStatus cfl_spectral_rescale(const struct CflModel *model, double c, struct CflModel **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CFL_H */
