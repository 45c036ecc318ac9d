#ifndef AUGSEG_H
#define AUGSEG_H

#include <stddef.h>
#include <stdint.h>

typedef enum AugsegStatus {
  AUGSEG_STATUS_OK = 0,
  AUGSEG_STATUS_OTHER = 1,
  AUGSEG_STATUS_VALIDATION = 2,
  AUGSEG_STATUS_INVARIANT = 3,
  AUGSEG_STATUS_IO = 4,
  AUGSEG_STATUS_NULL_ARGUMENT = 5,
  AUGSEG_STATUS_BUFFER_TOO_SMALL = 6,
  AUGSEG_STATUS_PANIC = 7,
} AugsegStatus;

// One task's adapter payload.
typedef struct AugsegAdapter AugsegAdapter;

// A frozen base model.
typedef struct AugsegModel AugsegModel;

// The record of a finished continual run.
typedef struct AugsegRun AugsegRun;

// AA / FM / FT of one metric. Missing values are NaN.
typedef struct AugsegSummary {
  double aa;
  double fm;
  double ft;
} AugsegSummary;

typedef struct AugsegParamCount {
  uint64_t trainable_count;
  uint64_t stored_count;
  uint64_t stored_bytes;
} AugsegParamCount;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *augseg_version(void);

// Message of the last failed call on this thread, or NULL. Valid until the next call.
const char *augseg_last_error(void);

// Loads a base checkpoint written by `augseg pretrain`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum AugsegStatus augseg_model_load(const char *path, struct AugsegModel **out);

// # Safety
// `model` must come from [`augseg_model_load`] or be NULL.
void augseg_model_free(struct AugsegModel *model);

// Image side length the model expects.
//
// # Safety
// Pointers must be valid.
enum AugsegStatus augseg_model_image_size(const struct AugsegModel *model, size_t *out);

// Writes the 64-character weight fingerprint plus a NUL into `buf`.
//
// # Safety
// `buf` must hold `len` bytes.
enum AugsegStatus augseg_model_fingerprint(const struct AugsegModel *model, char *buf, size_t len);

// Loads an adapter file from a run directory's `adapters/`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum AugsegStatus augseg_adapter_load(const char *path, struct AugsegAdapter **out);

// # Safety
// `adapter` must come from [`augseg_adapter_load`] or be NULL.
void augseg_adapter_free(struct AugsegAdapter *adapter);

// # Safety
// Pointers must be valid.
enum AugsegStatus augseg_adapter_task_id(const struct AugsegAdapter *adapter, uint32_t *out);

// Segments one image.
//
// `image` is channel-major `3 × S × S` in `[0, 1]`; `prompts` holds
// `n_prompts` `(row, col)` pairs. `adapter` may be NULL for the bare base.
// Writes `S × S` bytes (0 or 1) to `mask_out` and the predicted IoU to `iou_out`.
//
// # Safety
// Buffers must hold the stated lengths.
enum AugsegStatus augseg_predict(const struct AugsegModel *model,
                                 const struct AugsegAdapter *adapter,
                                 const double *image,
                                 size_t image_len,
                                 const uint32_t *prompts,
                                 size_t n_prompts,
                                 uint8_t *mask_out,
                                 size_t mask_len,
                                 double *iou_out);

// Runs a continual stream and writes the run directory.
//
// `config_path` may be NULL for defaults; `mode` is `samcl`, `samcl-oracle`
// or `baseline-lora`. The model must match the config's architecture.
//
// # Safety
// String arguments must be NUL-terminated; `out` must be valid.
enum AugsegStatus augseg_run(const struct AugsegModel *model,
                             const char *config_path,
                             const char *mode,
                             const char *out_dir,
                             struct AugsegRun **out);

// # Safety
// `run` must come from [`augseg_run`] or be NULL.
void augseg_run_free(struct AugsegRun *run);

// Summary of metric `metric` (0 mIoU, 1 mF1, 2 mMAE).
//
// # Safety
// Pointers must be valid.
enum AugsegStatus augseg_run_summary(const struct AugsegRun *run,
                                     uint32_t metric,
                                     struct AugsegSummary *out);

// AA / FM / FT of a `t × t` row-major accuracy matrix; NaN marks unfilled cells.
//
// # Safety
// `cells` must hold `t * t` values.
enum AugsegStatus augseg_matrix_summary(const double *cells, size_t t, struct AugsegSummary *out);

// Parameter accounting for `n_sites` sites that share input width `d_in`,
// with per-site output widths `d_out`.
//
// # Safety
// `variant` must be NUL-terminated; `d_out` must hold `n_sites` values.
enum AugsegStatus augseg_count_params(const char *variant,
                                      size_t rank,
                                      size_t d_in,
                                      const size_t *d_out,
                                      size_t n_sites,
                                      struct AugsegParamCount *out);

// Bytes one task's embedding buffer occupies.
uint64_t augseg_per_task_bytes(size_t cap, size_t dim, size_t float_bytes);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AUGSEG_H */
