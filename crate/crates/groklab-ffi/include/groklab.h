#ifndef GROKLAB_H
#define GROKLAB_H

/* Generated from the groklab-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Parameter block selector for spectral queries.
 */
typedef enum GlBlock {
  /**
   * The embedding table E.
   */
  GL_BLOCK_EMBEDDING = 0,
  /**
   * The first dense layer W1.
   */
  GL_BLOCK_FIRST_LAYER = 1,
} GlBlock;

/**
 * Result of every fallible entry point. `GL_STATUS_OK` is zero; anything
 * else leaves a description in `gl_last_error`.
 */
typedef enum GlStatus {
  GL_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  GL_STATUS_NULL_POINTER,
  /**
   * A string argument was not valid UTF-8.
   */
  GL_STATUS_UTF8,
  /**
   * A value failed validation (bad op name, dimension mismatch, ...).
   */
  GL_STATUS_INVALID_ARGUMENT,
  /**
   * The underlying file operation failed.
   */
  GL_STATUS_IO,
  /**
   * A file parsed but its contents are inconsistent.
   */
  GL_STATUS_CORRUPT,
  /**
   * Training or evaluation hit a non-finite value.
   */
  GL_STATUS_NUMERIC,
  /**
   * An internal invariant failed; the library state is still sound.
   */
  GL_STATUS_PANIC,
} GlStatus;

/**
 * Opaque handle to a loaded model checkpoint.
 */
typedef struct GlModel GlModel;

/**
 * Shape summary of a loaded model.
 */
typedef struct GlModelInfo {
  /**
   * Modulus (number of output classes).
   */
  uint64_t p;
  /**
   * Vocabulary size, p + 2.
   */
  uint64_t vocab;
  /**
   * Embedding dimension; 0 in no-embed mode.
   */
  uint64_t d;
  /**
   * Hidden width.
   */
  uint64_t h;
  /**
   * True when the model has an embedding table.
   */
  bool with_embed;
} GlModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread, or null if
 * none. The pointer stays valid until the next failing call on the same
 * thread; do not free it.
 */
const char *gl_last_error(void);

/**
 * Loads a model checkpoint written by the `groklab train` command.
 * On success `*out` owns the handle; release it with `gl_model_free`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum GlStatus gl_model_load(const char *path, struct GlModel **out);

/**
 * Releases a model handle. Null is a no-op.
 *
 * # Safety
 * `model` must be null or a handle previously returned by
 * `gl_model_load`, not yet freed.
 */
void gl_model_free(struct GlModel *model);

/**
 * Reports the model's dimensions.
 *
 * # Safety
 * `model` must be a live handle; `info` must be a valid pointer.
 */
enum GlStatus gl_model_info(const struct GlModel *model, struct GlModelInfo *info);

/**
 * Accuracy of the model over the full enumeration of the named task
 * (`"add"`, `"mul"`, `"div"`, `"sumsquares"`) at the model's modulus.
 *
 * # Safety
 * `model` must be a live handle; `op` a NUL-terminated string; `out` a
 * valid pointer.
 */
enum GlStatus gl_model_accuracy(const struct GlModel *model, const char *op, double *out);

/**
 * Largest singular value of the selected parameter block.
 *
 * # Safety
 * `model` must be a live handle; `out` a valid pointer.
 */
enum GlStatus gl_model_sigma_max(const struct GlModel *model, enum GlBlock block, double *out);

/**
 * DFT magnitude spectrum of the operand embedding rows: the first
 * ceil(p/2) per-frequency norms. Query the required length by passing a
 * null `out` (only `*written` is set); otherwise `capacity` must be at
 * least that length.
 *
 * # Safety
 * `model` must be a live handle; `written` a valid pointer; `out` null or
 * valid for `capacity` doubles.
 */
enum GlStatus gl_model_fft(const struct GlModel *model,
                           double *out,
                           size_t capacity,
                           size_t *written);

/**
 * Runs one training job from a flat `key = value` config file (the same
 * format the CLI accepts). `out_dir` overrides the file's `out` key when
 * non-null. On success, when `run_dir` is non-null it receives the run
 * directory path; release it with `gl_string_free`.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string; `out_dir` null or the
 * same; `run_dir` null or a valid pointer.
 */
enum GlStatus gl_train_file(const char *config_path, const char *out_dir, char **run_dir);

/**
 * Releases a string returned through an out parameter. Null is a no-op.
 *
 * # Safety
 * `s` must be null or a string previously returned by this library, not
 * yet freed.
 */
void gl_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GROKLAB_H */
