#ifndef ORTHOFAIR_H
#define ORTHOFAIR_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Which code `of_model_embed` returns.
 */
#define OF_EMBED_ZT_MEAN 0

#define OF_EMBED_ZS_MEAN 1

#define OF_EMBED_ZT_SAMPLE 2

/**
 * Result codes; the nonzero values match the command-line exit codes.
 */
typedef enum OfStatus {
  OF_STATUS_OK = 0,
  OF_STATUS_CONFIG = 2,
  OF_STATUS_DATA = 3,
  OF_STATUS_NUMERIC = 4,
  OF_STATUS_CONTRACT = 5,
  OF_STATUS_IO = 6,
  OF_STATUS_NULL_ARGUMENT = 10,
  OF_STATUS_INVALID_UTF8 = 11,
  OF_STATUS_PANIC = 12,
} OfStatus;

typedef struct OfDataset OfDataset;

typedef struct OfModel OfModel;

/**
 * Probe metrics of one model on the test split.
 */
typedef struct OfResult {
  double target_accuracy;
  double sensitive_accuracy;
  double target_majority;
  double sensitive_majority;
  double predictor_accuracy;
} OfResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *of_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *of_version(void);

/**
 * Loads the dataset described by a config file path or preset name.
 *
 * # Safety
 * `config` must be a NUL-terminated string and `out` a valid pointer.
 */
enum OfStatus of_dataset_from_config(const char *config, struct OfDataset **out);

/**
 * Reads a dataset cache written by `orthofair preprocess`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum OfStatus of_dataset_load_cache(const char *path, struct OfDataset **out);

/**
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
size_t of_dataset_rows(const struct OfDataset *ds);

/**
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
size_t of_dataset_dim(const struct OfDataset *ds);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void of_dataset_free(struct OfDataset *ds);

/**
 * Trains with the model, train and probe settings of `config` (file path
 * or preset name); the dataset section of the config is ignored.
 *
 * # Safety
 * `ds` must be a live dataset, `config` NUL-terminated, `out` valid.
 */
enum OfStatus of_model_train(const struct OfDataset *ds,
                             const char *config,
                             uint64_t seed,
                             struct OfModel **out);

/**
 * Loads a `checkpoint.json`; probes use default settings.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum OfStatus of_model_load(const char *path, struct OfModel **out);

/**
 * # Safety
 * `model` must be a live handle and `path` NUL-terminated.
 */
enum OfStatus of_model_save(const struct OfModel *model, const char *path);

/**
 * Width of the target code, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t of_model_code_dim(const struct OfModel *model);

/**
 * Writes the `rows × cols` embedding of every dataset row into `buf`
 * (row-major). Call with `buf = null` to query the shape only.
 *
 * # Safety
 * `buf` must be null or hold `capacity` doubles; `rows` and `cols` valid.
 */
enum OfStatus of_model_embed(const struct OfModel *model,
                             const struct OfDataset *ds,
                             uint32_t which,
                             double *buf,
                             size_t capacity,
                             size_t *rows,
                             size_t *cols);

/**
 * Trains fresh target and sensitive probes on the frozen target code.
 *
 * # Safety
 * `model` and `ds` must be live handles and `out` valid.
 */
enum OfStatus of_model_evaluate(const struct OfModel *model,
                                const struct OfDataset *ds,
                                struct OfResult *out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void of_model_free(struct OfModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ORTHOFAIR_H */
