#ifndef STFNN_H
#define STFNN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. `STFNN_STATUS_OK` is zero; everything else is a failure.
typedef enum StfnnStatus {
  STFNN_STATUS_OK = 0,
  STFNN_STATUS_NULL_POINTER = 1,
  STFNN_STATUS_INVALID_ARGUMENT = 2,
  STFNN_STATUS_IO = 3,
  STFNN_STATUS_PARSE = 4,
  STFNN_STATUS_SHAPE = 5,
  STFNN_STATUS_INSUFFICIENT_CONTEXT = 6,
  STFNN_STATUS_CHECKPOINT = 7,
  STFNN_STATUS_NUMERIC = 8,
  STFNN_STATUS_PANIC = 9,
} StfnnStatus;

// Observations loaded from CSV.
typedef struct StfnnDataset StfnnDataset;

// A field model plus the normalizer it was trained with, if any.
typedef struct StfnnModel StfnnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null if none. The pointer
// stays valid until the next failing call on the same thread.
const char *stfnn_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *stfnn_version(void);

// Writes the 10-value code of `(x, y, tau)` with unscaled periods.
//
// # Safety
// `out` must point to 10 writable doubles.
enum StfnnStatus stfnn_encode(double x, double y, double tau, double *out);

// A freshly initialized model with default hyperparameters.
//
// # Safety
// `out` must be a valid pointer to a handle slot.
enum StfnnStatus stfnn_model_new(size_t feature_dim, uint64_t seed, struct StfnnModel **out);

// Loads a JSON checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string; `out` a valid handle slot.
enum StfnnStatus stfnn_model_load(const char *path, struct StfnnModel **out);

// Saves the model as a JSON checkpoint.
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum StfnnStatus stfnn_model_save(const struct StfnnModel *model, const char *path);

// # Safety
// `model` must be null or a handle not yet freed.
void stfnn_model_free(struct StfnnModel *model);

// Number of trainable scalars, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t stfnn_model_param_count(const struct StfnnModel *model);

// Feature width the model expects, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t stfnn_model_feature_dim(const struct StfnnModel *model);

// The learned gradient at normalized `c[3]`, written to `out[3]`.
//
// # Safety
// `model` must be a live handle; `c` and `out` must each hold 3 doubles.
enum StfnnStatus stfnn_model_field_probe(const struct StfnnModel *model,
                                         const double *c,
                                         double *out);

// Infers one target from an explicit, already normalized context.
//
// `coords` holds `n * 3` values `(x, y, tau)` row by row, `values` holds
// `n` targets and `features` holds `n * feature_dim` values (may be null
// when `feature_dim` is 0). `weights`, if not null, receives the `n`
// aggregation weights.
//
// # Safety
// All non-null pointers must reference arrays of the stated lengths.
enum StfnnStatus stfnn_model_infer(const struct StfnnModel *model,
                                   size_t n,
                                   const double *coords,
                                   const double *values,
                                   const double *features,
                                   size_t feature_dim,
                                   const double *target,
                                   double *out_estimate,
                                   double *weights);

// Loads observations from a CSV file. `schema_json` is a JSON object with
// `numeric_features` and `categorical_features` column lists, or null for
// no feature columns.
//
// # Safety
// `path` and non-null `schema_json` must be NUL-terminated strings; `out`
// a valid handle slot.
enum StfnnStatus stfnn_dataset_load_csv(const char *path,
                                        const char *schema_json,
                                        struct StfnnDataset **out);

// # Safety
// `dataset` must be null or a handle not yet freed.
void stfnn_dataset_free(struct StfnnDataset *dataset);

// # Safety
// `dataset` must be null or a live handle.
size_t stfnn_dataset_station_count(const struct StfnnDataset *dataset);

// # Safety
// `dataset` must be null or a live handle.
size_t stfnn_dataset_timestep_count(const struct StfnnDataset *dataset);

// Infers the raw-unit value at `(lng, lat)` and Unix time `unix_seconds`
// from the dataset's `k_spatial` nearest stations over `t_hist` steps.
// The model must carry a normalizer, i.e. come from a trained checkpoint.
//
// # Safety
// Handles must be live; `out_estimate` must be writable.
enum StfnnStatus stfnn_infer_at(const struct StfnnModel *model,
                                struct StfnnDataset *dataset,
                                double lng,
                                double lat,
                                int64_t unix_seconds,
                                size_t k_spatial,
                                size_t t_hist,
                                double *out_estimate);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STFNN_H */
