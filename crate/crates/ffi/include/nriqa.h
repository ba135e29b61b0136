/* C interface for the nriqa image quality model. */

#ifndef NRIQA_H
#define NRIQA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every `nriqa_*` function.
 */
typedef enum nriqa_status {
  NRIQA_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  NRIQA_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  NRIQA_INVALID_UTF8 = 2,
  /**
   * Invalid configuration or configuration/shape mismatch.
   */
  NRIQA_CONFIG_ERROR = 3,
  /**
   * Malformed manifest, label, image or other data problem.
   */
  NRIQA_DATA_ERROR = 4,
  /**
   * Non-finite values or degenerate numeric inputs.
   */
  NRIQA_NUMERIC_ERROR = 5,
  /**
   * Filesystem failure or malformed checkpoint.
   */
  NRIQA_IO_ERROR = 6,
} nriqa_status;

/**
 * An opaque dataset handle.
 */
typedef struct nriqa_dataset nriqa_dataset;

/**
 * An opaque trained or initialized model handle.
 */
typedef struct nriqa_model nriqa_model;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the message of the most recent failure on this thread into `buf`
 * (NUL-terminated, truncated to `cap`). Returns the full message length in
 * bytes, excluding the terminator; 0 means no error has occurred yet.
 * Passing `buf = NULL` or `cap = 0` only queries the length.
 */
size_t nriqa_last_error(char *buf, size_t cap);

/**
 * Library version as a static NUL-terminated string.
 */
const char *nriqa_version(void);

/**
 * Creates a model from a config JSON string (`config_json = NULL` selects
 * the built-in desk-scale defaults). `seed` overrides the config seed.
 * On success `*out` owns the new handle.
 */
enum nriqa_status nriqa_model_new(const char *config_json, uint64_t seed, struct nriqa_model **out);

/**
 * Loads a model from a checkpoint directory written by `nriqa_model_save`
 * or by the CLI trainer.
 */
enum nriqa_status nriqa_model_load(const char *dir, struct nriqa_model **out);

/**
 * Writes the model (tensors, config fingerprint, training counters) to a
 * checkpoint directory, creating it if needed.
 */
enum nriqa_status nriqa_model_save(const struct nriqa_model *model, const char *dir);

/**
 * Releases a model handle. NULL is ignored.
 */
void nriqa_model_free(struct nriqa_model *model);

/**
 * Loads a dataset from a manifest CSV (columns `path,mos[,scene,distortion]`,
 * image paths relative to the manifest).
 */
enum nriqa_status nriqa_dataset_load(const char *manifest, struct nriqa_dataset **out);

/**
 * Generates the synthetic labeled dataset (`n` images of side `image_size`)
 * entirely in memory.
 */
enum nriqa_status nriqa_dataset_synthesize(size_t n,
                                           uint64_t seed,
                                           size_t image_size,
                                           struct nriqa_dataset **out);

/**
 * Number of images in the dataset; 0 if `ds` is NULL.
 */
size_t nriqa_dataset_len(const struct nriqa_dataset *ds);

/**
 * Releases a dataset handle. NULL is ignored.
 */
void nriqa_dataset_free(struct nriqa_dataset *ds);

/**
 * Trains the model in place on `ds`. `label_policy` is one of
 * `"auto"`, `"manifest"`, `"pseudo"`, `"off"`; NULL means `"auto"`.
 * `checkpoint_dir` (optional, NULL to skip) receives the best-validation
 * snapshot while training runs.
 */
enum nriqa_status nriqa_train(struct nriqa_model *model,
                              const struct nriqa_dataset *ds,
                              const char *label_policy,
                              const char *checkpoint_dir);

/**
 * Scores one interleaved RGB image (row-major, 3 floats per pixel in
 * `[0, 1]`, `width * height * 3` elements). The crop sampler is seeded
 * with `seed`, so equal inputs give equal scores. The score lands in
 * `*out_score`.
 */
enum nriqa_status nriqa_predict(const struct nriqa_model *model,
                                const float *pixels,
                                size_t width,
                                size_t height,
                                uint64_t seed,
                                double *out_score);

/**
 * Scores an image file (any format the decoder supports; PNG is what the
 * toolchain writes).
 */
enum nriqa_status nriqa_predict_path(const struct nriqa_model *model,
                                     const char *path,
                                     uint64_t seed,
                                     double *out_score);

/**
 * Scores every image in `ds` and writes rank (SRCC) and linear (PLCC)
 * correlation against the dataset MOS.
 */
enum nriqa_status nriqa_evaluate(const struct nriqa_model *model,
                                 const struct nriqa_dataset *ds,
                                 uint64_t seed,
                                 double *out_srcc,
                                 double *out_plcc);

/**
 * Spearman rank correlation of two length-`n` arrays into `*out`.
 */
enum nriqa_status nriqa_srcc(const double *a, const double *b, size_t n, double *out);

/**
 * Pearson linear correlation of two length-`n` arrays into `*out`.
 */
enum nriqa_status nriqa_plcc(const double *a, const double *b, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NRIQA_H */
