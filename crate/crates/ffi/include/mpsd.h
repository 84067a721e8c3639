#ifndef MPSD_H
#define MPSD_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call. Values above Ok match
 * the CLI exit codes.
 */
typedef enum MpsdStatus {
  MPSD_STATUS_OK = 0,
  /**
   * Null pointer or malformed UTF-8/JSON argument.
   */
  MPSD_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Unusable configuration or unreadable file.
   */
  MPSD_STATUS_USAGE = 2,
  /**
   * Bad data, schema or artifact content.
   */
  MPSD_STATUS_DATA = 3,
  /**
   * Privacy budget cannot pay for a single update.
   */
  MPSD_STATUS_BUDGET = 4,
} MpsdStatus;

/**
 * Opaque trained-model handle.
 */
typedef struct mpsd_model_t mpsd_model_t;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (always
 * NUL-terminated when `len > 0`). Returns the full message length in
 * bytes, excluding the terminator; 0 when there is no pending error.
 */
uintptr_t mpsd_last_error(char *buf, uintptr_t len);

/**
 * Loads a model artifact. On success `*out` owns the handle; release
 * it with mpsd_model_free.
 */
enum MpsdStatus mpsd_model_load(const char *path, struct mpsd_model_t **out);

/**
 * Writes the model artifact to `path`.
 */
enum MpsdStatus mpsd_model_save(const struct mpsd_model_t *model, const char *path);

/**
 * Releases a handle returned by mpsd_model_load or mpsd_fit. Null is a
 * no-op.
 */
void mpsd_model_free(struct mpsd_model_t *model);

/**
 * Number of tensor cores in the chain; 0 for a null handle.
 */
uintptr_t mpsd_model_num_cores(const struct mpsd_model_t *model);

/**
 * Total trainable parameter count; 0 for a null handle.
 */
uintptr_t mpsd_model_num_parameters(const struct mpsd_model_t *model);

/**
 * Trains a model from the JSON run configuration (same document the
 * CLI accepts; `data` and `out_dir` must be set). Artifacts are written
 * under out_dir and the trained model is returned through `out`.
 */
enum MpsdStatus mpsd_fit(const char *config_json, struct mpsd_model_t **out);

/**
 * Samples `count` synthetic records and writes them as CSV.
 */
enum MpsdStatus mpsd_sample_csv(const struct mpsd_model_t *model,
                                uintptr_t count,
                                uint64_t seed,
                                const char *out_path);

/**
 * Scores synthetic CSVs against real data; writes report.json and
 * report.csv under the config's out_dir. `synth_paths` is an array of
 * `num_synth` C strings.
 */
enum MpsdStatus mpsd_evaluate(const char *config_json,
                              const char *real_path,
                              const char *const *synth_paths,
                              uintptr_t num_synth,
                              const char *schema_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MPSD_H */
