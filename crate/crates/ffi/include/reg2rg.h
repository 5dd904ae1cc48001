#ifndef REG2RG_H
#define REG2RG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum Reg2rgStatus {
  REG2RG_STATUS_OK = 0,
  /**
   * A null pointer, invalid UTF-8 or an out-of-range argument.
   */
  REG2RG_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Input data or configuration was rejected.
   */
  REG2RG_STATUS_VALIDATION = 2,
  /**
   * A file could not be read or written.
   */
  REG2RG_STATUS_IO = 3,
  /**
   * Any other failure during execution.
   */
  REG2RG_STATUS_RUNTIME = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  REG2RG_STATUS_PANIC = 5,
} Reg2rgStatus;

/**
 * Opaque model handle: a model with its trained parameters.
 */
typedef struct Reg2rgModel Reg2rgModel;

/**
 * Opaque volume handle.
 */
typedef struct Reg2rgVolume Reg2rgVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on this thread.
 */
const char *reg2rg_last_error(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed only once.
 */
void reg2rg_string_free(char *s);

/**
 * BLEU-`n` of `candidate` against `reference`, on a 0-100 scale.
 *
 * # Safety
 * String arguments must be valid NUL-terminated strings; `out` must be valid.
 */
enum Reg2rgStatus reg2rg_bleu(const char *candidate, const char *reference, size_t n, double *out);

/**
 * ROUGE-L F1 on a 0-100 scale.
 *
 * # Safety
 * As for [`reg2rg_bleu`].
 */
enum Reg2rgStatus reg2rg_rouge_l(const char *candidate, const char *reference, double *out);

/**
 * METEOR with the default synonym table, on a 0-100 scale.
 *
 * # Safety
 * As for [`reg2rg_bleu`].
 */
enum Reg2rgStatus reg2rg_meteor(const char *candidate, const char *reference, double *out);

/**
 * Parses generated text into a JSON object `{raw, sections}`.
 *
 * # Safety
 * `text` must be a valid string; `out_json` must be valid.
 */
enum Reg2rgStatus reg2rg_parse_report(const char *text, char **out_json);

/**
 * Abnormality names the default rule labeler finds positive in `text`, as a
 * JSON array of strings.
 *
 * # Safety
 * As for [`reg2rg_parse_report`].
 */
enum Reg2rgStatus reg2rg_extract_labels(const char *text, char **out_json);

/**
 * Loads a raw volume with its JSON sidecar header.
 *
 * # Safety
 * `path` must be a valid string; `out` must be valid.
 */
enum Reg2rgStatus reg2rg_volume_load(const char *path, struct Reg2rgVolume **out);

/**
 * Writes the volume's `[H, W, D]` into `dims`.
 *
 * # Safety
 * `volume` must come from [`reg2rg_volume_load`]; `dims` must hold 3 values.
 */
enum Reg2rgStatus reg2rg_volume_dims(const struct Reg2rgVolume *volume, size_t *dims);

/**
 * Borrows the voxel data; valid while the handle lives.
 *
 * # Safety
 * `volume` must come from [`reg2rg_volume_load`]; out pointers must be valid.
 */
enum Reg2rgStatus reg2rg_volume_data(const struct Reg2rgVolume *volume,
                                     const float **data,
                                     size_t *len);

/**
 * # Safety
 * `volume` must be null or a handle from [`reg2rg_volume_load`], freed once.
 */
void reg2rg_volume_free(struct Reg2rgVolume *volume);

/**
 * Loads a checkpoint written by the trainer.
 *
 * # Safety
 * `path` must be a valid string; `out` must be valid.
 */
enum Reg2rgStatus reg2rg_model_load(const char *path, struct Reg2rgModel **out);

/**
 * The model's config hash as a hex string.
 *
 * # Safety
 * `model` must come from [`reg2rg_model_load`]; `out` must be valid.
 */
enum Reg2rgStatus reg2rg_model_config_hash(const struct Reg2rgModel *model, char **out);

/**
 * Greedily generates a report for record `sample_id` of the manifest at
 * `manifest_path`, with regions in manifest order. The result is the JSON
 * object `{raw, sections}`.
 *
 * # Safety
 * `model` must come from [`reg2rg_model_load`]; strings must be valid;
 * `out_json` must be valid.
 */
enum Reg2rgStatus reg2rg_model_generate(const struct Reg2rgModel *model,
                                        const char *manifest_path,
                                        const char *sample_id,
                                        size_t max_new_tokens,
                                        char **out_json);

/**
 * # Safety
 * `model` must be null or a handle from [`reg2rg_model_load`], freed once.
 */
void reg2rg_model_free(struct Reg2rgModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REG2RG_H */
