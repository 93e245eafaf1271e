#ifndef EMBFUSE_H
#define EMBFUSE_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum EmbfuseStatus {
  EMBFUSE_STATUS_OK = 0,
  EMBFUSE_STATUS_NULL_POINTER = 1,
  EMBFUSE_STATUS_INVALID_ARGUMENT = 2,
  EMBFUSE_STATUS_DATA_ERROR = 3,
  EMBFUSE_STATUS_NUMERIC_ERROR = 4,
  EMBFUSE_STATUS_PANIC = 5,
} EmbfuseStatus;

// Row-major embedding matrix with one encoder id.
typedef struct EmbfuseMatrix EmbfuseMatrix;

// Retained columns of a pruned feature matrix.
typedef struct EmbfuseSignature EmbfuseSignature;

typedef struct EmbfuseMetricConfig {
  size_t knn_k;
  double ridge_lambda;
  double svcca_variance_fraction;
  size_t procrustes_dim_cap;
} EmbfuseMetricConfig;

typedef struct EmbfuseSimilarity {
  double cka;
  double svcca;
  double procrustes;
  double knn_jaccard;
  double r2_ab;
  double r2_ba;
} EmbfuseSimilarity;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *embfuse_version(void);

// Copies the calling thread's last error message into a new string, or
// returns null if the last call succeeded. Free with [`embfuse_string_free`].
char *embfuse_last_error(void);

// # Safety
// `s` must be null or a string returned by this library.
void embfuse_string_free(char *s);

// Builds a matrix from `rows × cols` row-major values.
//
// # Safety
// `data` must point to `rows * cols` doubles; `encoder_id` must be a
// NUL-terminated string; `out_matrix` must be writable.
enum EmbfuseStatus embfuse_matrix_new(const char *encoder_id,
                                      const double *data,
                                      size_t rows,
                                      size_t cols,
                                      struct EmbfuseMatrix **out_matrix);

// Loads a `.csv` or binary embedding file.
//
// # Safety
// `path` and `encoder_id` must be NUL-terminated strings; `out_matrix` writable.
enum EmbfuseStatus embfuse_matrix_load(const char *path,
                                       const char *encoder_id,
                                       struct EmbfuseMatrix **out_matrix);

// # Safety
// `m` must be null or a handle from this library, not yet freed.
void embfuse_matrix_free(struct EmbfuseMatrix *m);

// # Safety
// `m` must be a live handle; `rows` and `cols` writable.
enum EmbfuseStatus embfuse_matrix_shape(const struct EmbfuseMatrix *m, size_t *rows, size_t *cols);

// Fills `out_config` with the default metric parameters.
//
// # Safety
// `out_config` must be writable.
enum EmbfuseStatus embfuse_metric_config_default(struct EmbfuseMetricConfig *out_config);

// All similarity scores between two matrices over the same samples.
// A null `config` selects the defaults.
//
// # Safety
// `a`, `b` must be live handles; `config` null or readable; `out_scores` writable.
enum EmbfuseStatus embfuse_similarity(const struct EmbfuseMatrix *a,
                                      const struct EmbfuseMatrix *b,
                                      const struct EmbfuseMetricConfig *config,
                                      struct EmbfuseSimilarity *out_scores);

// Ranks the columns of `m` by class separation and prunes at `theta`.
//
// # Safety
// `m` must be a live handle; `labels` must hold one 0/1 byte per row;
// `out_signature` writable.
enum EmbfuseStatus embfuse_prune(const struct EmbfuseMatrix *m,
                                 const uint8_t *labels,
                                 size_t n_labels,
                                 double theta,
                                 struct EmbfuseSignature **out_signature);

// # Safety
// `s` must be a live handle; `len` writable.
enum EmbfuseStatus embfuse_signature_len(const struct EmbfuseSignature *s, size_t *len);

// Copies retained column indices (rank order) into `indices`, which must
// have room for at least `capacity` entries.
//
// # Safety
// `s` must be a live handle; `indices` must be writable for `capacity` values.
enum EmbfuseStatus embfuse_signature_indices(const struct EmbfuseSignature *s,
                                             size_t *indices,
                                             size_t capacity);

// Signature as JSON. Free the string with [`embfuse_string_free`].
//
// # Safety
// `s` must be a live handle; `out_json` writable.
enum EmbfuseStatus embfuse_signature_to_json(const struct EmbfuseSignature *s, char **out_json);

// # Safety
// `s` must be null or a handle from this library, not yet freed.
void embfuse_signature_free(struct EmbfuseSignature *s);

// Rank-based AUC. `*defined` is false (and `*out_auc` NaN) when only one class is present.
//
// # Safety
// `probs` and `labels` must hold `n` values; `out_auc` and `defined` writable.
enum EmbfuseStatus embfuse_auc(const double *probs,
                               const uint8_t *labels,
                               size_t n,
                               double *out_auc,
                               bool *defined);

// Dice overlap of two 0/1 masks of length `n`; two empty masks give 1.
//
// # Safety
// `a` and `b` must hold `n` bytes; `out_dice` writable.
enum EmbfuseStatus embfuse_dice(const uint8_t *a, const uint8_t *b, size_t n, double *out_dice);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EMBFUSE_H */
