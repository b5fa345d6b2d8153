#ifndef MIXEDQ_H
#define MIXEDQ_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MixedqMethod {
  MIXEDQ_METHOD_I_BERT = 0,
  MIXEDQ_METHOD_FQ_VIT = 1,
  MIXEDQ_METHOD_I_VIT = 2,
} MixedqMethod;

typedef enum MixedqOpKind {
  MIXEDQ_OP_KIND_SOFTMAX = 0,
  MIXEDQ_OP_KIND_GELU = 1,
  MIXEDQ_OP_KIND_LAYER_NORM = 2,
} MixedqOpKind;

typedef enum MixedqRule {
  MIXEDQ_RULE_SQNR_DIFF = 0,
  MIXEDQ_RULE_SQNR_OUTPUT = 1,
} MixedqRule;

typedef enum MixedqStatus {
  MIXEDQ_STATUS_OK = 0,
  // Null pointer, out-of-range index or mismatched buffer length.
  MIXEDQ_STATUS_INVALID_ARGUMENT = 1,
  MIXEDQ_STATUS_INVALID_INPUT = 2,
  MIXEDQ_STATUS_OVERFLOW = 3,
  MIXEDQ_STATUS_INVALID_STATE = 4,
  MIXEDQ_STATUS_PARSE = 5,
  MIXEDQ_STATUS_IO = 6,
  MIXEDQ_STATUS_PANIC = 7,
} MixedqStatus;

typedef struct MixedqAssignment MixedqAssignment;

typedef struct MixedqModel MixedqModel;

typedef struct MixedqTable MixedqTable;

// Model architecture and quantization settings.
typedef struct MixedqModelConfig {
  size_t depth;
  size_t embed_dim;
  size_t heads;
  double mlp_ratio;
  size_t seq_len;
  size_t input_dim;
  size_t num_classes;
  uint32_t bits;
  uint64_t seed;
} MixedqModelConfig;

// One row of a sensitivity table.
typedef struct MixedqRecord {
  size_t layer_index;
  enum MixedqOpKind op_kind;
  enum MixedqMethod method;
  double asqnr_in_db;
  double asqnr_out_db;
  double sqnr_diff_db;
} MixedqRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next failing call on the same thread.
const char *mixedq_last_error(void);

// Library version as a static NUL-terminated string.
const char *mixedq_version(void);

// # Safety
// `s` must be NULL or a string returned by this library, not yet freed.
void mixedq_string_free(char *s);

struct MixedqModelConfig mixedq_model_config_default(void);

// Builds a seeded model.
//
// # Safety
// `cfg` must point to a valid config and `out_model` to writable storage.
enum MixedqStatus mixedq_model_new(const struct MixedqModelConfig *cfg,
                                   struct MixedqModel **out_model);

// Loads a model from a weights manifest.
//
// # Safety
// `path` must be a NUL-terminated string and `out_model` writable.
enum MixedqStatus mixedq_model_load(const char *path, struct MixedqModel **out_model);

// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum MixedqStatus mixedq_model_save(const struct MixedqModel *model, const char *path);

// # Safety
// `model` must be NULL or a handle from this library, not yet freed.
void mixedq_model_free(struct MixedqModel *model);

// # Safety
// `model` must be a live handle and `out_cfg` writable.
enum MixedqStatus mixedq_model_config(const struct MixedqModel *model,
                                      struct MixedqModelConfig *out_cfg);

// Number of non-linear layers.
//
// # Safety
// `model` must be a live handle and `out_count` writable.
enum MixedqStatus mixedq_model_layer_count(const struct MixedqModel *model, size_t *out_count);

// Kind of the non-linear layer at `index`.
//
// # Safety
// `model` must be a live handle and `out_kind` writable.
enum MixedqStatus mixedq_model_layer_kind(const struct MixedqModel *model,
                                          size_t index,
                                          enum MixedqOpKind *out_kind);

// Measures every layer under every method.
//
// `data` holds `n_batches * batch_size * seq_len * input_dim` values in
// row-major `(batch, seq, feature)` order.
//
// # Safety
// `model` must be a live handle, `data` must point to `data_len` values and
// `out_table` must be writable.
enum MixedqStatus mixedq_analyze(const struct MixedqModel *model,
                                 const double *data,
                                 size_t data_len,
                                 size_t n_batches,
                                 size_t batch_size,
                                 struct MixedqTable **out_table);

// Parses a table from sensitivity CSV text.
//
// # Safety
// `csv` must be a NUL-terminated string and `out_table` writable.
enum MixedqStatus mixedq_table_from_csv(const char *csv, struct MixedqTable **out_table);

// # Safety
// `table` must be a live handle and `out_csv` writable. Free the result
// with [`mixedq_string_free`].
enum MixedqStatus mixedq_table_to_csv(const struct MixedqTable *table, char **out_csv);

// # Safety
// `table` must be a live handle and `out_len` writable.
enum MixedqStatus mixedq_table_len(const struct MixedqTable *table, size_t *out_len);

// # Safety
// `table` must be a live handle and `out_record` writable.
enum MixedqStatus mixedq_table_record(const struct MixedqTable *table,
                                      size_t index,
                                      struct MixedqRecord *out_record);

// # Safety
// `table` must be NULL or a handle from this library, not yet freed.
void mixedq_table_free(struct MixedqTable *table);

// Picks one method per layer.
//
// # Safety
// `table` must be a live handle and `out_assignment` writable.
enum MixedqStatus mixedq_select(const struct MixedqTable *table,
                                enum MixedqRule rule,
                                struct MixedqAssignment **out_assignment);

// Every layer of `model` uses `method` (GELU falls back to I-BERT for FQ-ViT).
//
// # Safety
// `model` must be a live handle and `out_assignment` writable.
enum MixedqStatus mixedq_assignment_uniform(const struct MixedqModel *model,
                                            enum MixedqMethod method,
                                            struct MixedqAssignment **out_assignment);

// # Safety
// `json` must be a NUL-terminated string and `out_assignment` writable.
enum MixedqStatus mixedq_assignment_from_json(const char *json,
                                              struct MixedqAssignment **out_assignment);

// # Safety
// `assignment` must be a live handle and `out_json` writable. Free the
// result with [`mixedq_string_free`].
enum MixedqStatus mixedq_assignment_to_json(const struct MixedqAssignment *assignment,
                                            char **out_json);

// Method chosen for the non-linear layer at `index` of `model`.
//
// # Safety
// All pointers must be live handles or writable storage.
enum MixedqStatus mixedq_assignment_get(const struct MixedqAssignment *assignment,
                                        const struct MixedqModel *model,
                                        size_t index,
                                        enum MixedqMethod *out_method);

// # Safety
// `assignment` must be NULL or a handle from this library, not yet freed.
void mixedq_assignment_free(struct MixedqAssignment *assignment);

// Float forward pass of one batch; writes `batch_size * num_classes` logits.
//
// # Safety
// `data` must point to `data_len` values and `logits` to `logits_len`.
enum MixedqStatus mixedq_forward_fp(const struct MixedqModel *model,
                                    const double *data,
                                    size_t data_len,
                                    size_t batch_size,
                                    double *logits,
                                    size_t logits_len);

// Integer forward pass of one batch under `assignment`. A model that was
// never calibrated is calibrated on this batch first.
//
// # Safety
// As [`mixedq_forward_fp`]; `assignment` must be a live handle.
enum MixedqStatus mixedq_forward_quant(const struct MixedqModel *model,
                                       const struct MixedqAssignment *assignment,
                                       const double *data,
                                       size_t data_len,
                                       size_t batch_size,
                                       double *logits,
                                       size_t logits_len);

// SQNR in dB of `q` against `x`, both of length `len`.
//
// # Safety
// `x` and `q` must point to `len` values; `out_db` must be writable.
enum MixedqStatus mixedq_sqnr(const double *x, const double *q, size_t len, double *out_db);

// Runs one kernel along the rows of a `rows x cols` matrix quantized at
// `bits` and writes the dequantized output.
//
// # Safety
// `input` and `output` must each point to `rows * cols` values.
enum MixedqStatus mixedq_kernel_run(enum MixedqOpKind op,
                                    enum MixedqMethod method,
                                    const double *input,
                                    size_t rows,
                                    size_t cols,
                                    uint32_t bits,
                                    double *output);

// `floor(sqrt(n))` by Newton iteration capped at `max_iters` steps.
uint64_t mixedq_isqrt(uint64_t n, uint32_t max_iters);

// Exact number of assignments as a decimal string.
//
// # Safety
// `out_decimal` must be writable; free the result with [`mixedq_string_free`].
enum MixedqStatus mixedq_search_space(size_t softmax,
                                      size_t gelu,
                                      size_t layernorm,
                                      char **out_decimal);

uint64_t mixedq_evaluation_count(size_t softmax, size_t gelu, size_t layernorm);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIXEDQ_H */
