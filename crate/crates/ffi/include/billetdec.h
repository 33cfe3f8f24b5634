/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef BILLETDEC_H
#define BILLETDEC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BdStatus {
  BD_STATUS_OK = 0,
  BD_STATUS_NULL_POINTER = 1,
  BD_STATUS_INVALID_ARGUMENT = 2,
  BD_STATUS_PARSE = 3,
  BD_STATUS_IO = 4,
  BD_STATUS_ALPHABET_MISMATCH = 5,
  BD_STATUS_INTERNAL = 6,
  BD_STATUS_PANIC = 7,
} BdStatus;

typedef enum BdProvenance {
  BD_PROVENANCE_NORMAL = 0,
  BD_PROVENANCE_BLANK_REPAIRED = 1,
  BD_PROVENANCE_RULE_CORRECTED = 2,
} BdProvenance;

typedef struct BdLattice BdLattice;

typedef struct BdModel BdModel;

typedef struct BdResult BdResult;

typedef struct BdRules BdRules;

/**
 * Decoder switches; start from `bd_decode_options_default`.
 */
typedef struct BdDecodeOptions {
  bool repair_enabled;
  bool rules_enabled;
  size_t min_run;
  bool repair_edges;
} BdDecodeOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. Valid until
 * the next `bd_*` call on the same thread.
 */
const char *bd_last_error(void);

/**
 * Library version as a static string.
 */
const char *bd_version(void);

/**
 * Releases a string returned by this library with ownership.
 *
 * # Safety
 * `s` must come from a `bd_*` call documented as returning an owned string,
 * or be NULL.
 */
void bd_string_free(char *s);

/**
 * Shannon entropy (nats) of a probability vector summing to 1.
 *
 * # Safety
 * `probs` must point to `len` doubles.
 */
enum BdStatus bd_entropy(const double *probs, size_t len, double *out);

/**
 * Elementwise `1 / (1 + exp(-k (p - t)))` over `len` values.
 *
 * # Safety
 * `prob`, `thresh` and `out` must each point to `len` doubles.
 */
enum BdStatus bd_db_binarize(const double *prob,
                             const double *thresh,
                             size_t len,
                             double k,
                             double *out);

/**
 * Levenshtein distance between two UTF-8 strings, in characters.
 *
 * # Safety
 * `a` and `b` must be NUL-terminated strings.
 */
enum BdStatus bd_edit_distance(const char *a, const char *b, size_t *out);

/**
 * Builds a lattice from `timesteps * classes` row-major probabilities.
 * `classes` must equal the alphabet length plus one (blank last).
 *
 * # Safety
 * `alphabet` must be a NUL-terminated string and `probs` must point to
 * `timesteps * classes` doubles.
 */
enum BdStatus bd_lattice_new(const char *alphabet,
                             size_t timesteps,
                             size_t classes,
                             const double *probs,
                             struct BdLattice **out);

/**
 * Parses a lattice in the `LAT1` text format.
 *
 * # Safety
 * `text` must be a NUL-terminated string.
 */
enum BdStatus bd_lattice_parse(const char *text, struct BdLattice **out);

/**
 * Loads a text or binary lattice file.
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum BdStatus bd_lattice_load(const char *path, struct BdLattice **out);

/**
 * # Safety
 * `lattice` must be a live handle or NULL (returns 0).
 */
size_t bd_lattice_timesteps(const struct BdLattice *lattice);

/**
 * # Safety
 * `lattice` must be a live handle or NULL (returns 0).
 */
size_t bd_lattice_classes(const struct BdLattice *lattice);

/**
 * Mean per-row entropy in nats.
 *
 * # Safety
 * `lattice` must be a live handle.
 */
enum BdStatus bd_lattice_mean_entropy(const struct BdLattice *lattice, double *out);

/**
 * # Safety
 * `lattice` must be a handle from this library or NULL; it is invalid afterwards.
 */
void bd_lattice_free(struct BdLattice *lattice);

/**
 * The bundled billet numbering schema.
 *
 * # Safety
 * `out` must be writable.
 */
enum BdStatus bd_rules_billet(struct BdRules **out);

/**
 * Parses encoding rules (`name CLASS length` per line).
 *
 * # Safety
 * `text` must be a NUL-terminated string.
 */
enum BdStatus bd_rules_parse(const char *text, struct BdRules **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum BdStatus bd_rules_load(const char *path, struct BdRules **out);

/**
 * Writes whether `text` satisfies every positional constraint.
 *
 * # Safety
 * `rules` must be a live handle and `text` a NUL-terminated string.
 */
enum BdStatus bd_rules_is_valid(const struct BdRules *rules, const char *text, bool *out);

/**
 * # Safety
 * `rules` must be a handle from this library or NULL.
 */
void bd_rules_free(struct BdRules *rules);

/**
 * Loads a checkpoint written by `billetdec train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum BdStatus bd_model_load(const char *path, struct BdModel **out);

/**
 * Slides the classifier over a grayscale strip (`height * width` values in
 * [0, 1], row-major) and returns the probability lattice. `stride` 0 picks
 * half the window.
 *
 * # Safety
 * `model` must be a live handle and `pixels` must point to `height * width` doubles.
 */
enum BdStatus bd_model_classify_strip(const struct BdModel *model,
                                      const double *pixels,
                                      size_t height,
                                      size_t width,
                                      size_t stride,
                                      struct BdLattice **out);

/**
 * # Safety
 * `model` must be a handle from this library or NULL.
 */
void bd_model_free(struct BdModel *model);

/**
 * Repair and rules on, minimum blank run 3, edge runs skipped.
 */
struct BdDecodeOptions bd_decode_options_default(void);

/**
 * Greedy CTC decoding with optional blank-run repair and rule correction.
 * `rules` may be NULL (no correction); `options` may be NULL (defaults).
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum BdStatus bd_decode(const struct BdLattice *lattice,
                        const struct BdRules *rules,
                        const struct BdDecodeOptions *options,
                        struct BdResult **out);

/**
 * Decoded text, borrowed from the result.
 *
 * # Safety
 * `result` must be a live handle or NULL (returns NULL).
 */
const char *bd_result_text(const struct BdResult *result);

/**
 * Number of decoded characters.
 *
 * # Safety
 * `result` must be a live handle or NULL (returns 0).
 */
size_t bd_result_len(const struct BdResult *result);

/**
 * Character `index` as a Unicode scalar, the lattice timestep it came from
 * and how it was produced. Any output pointer may be NULL.
 *
 * # Safety
 * `result` must be a live handle.
 */
enum BdStatus bd_result_char(const struct BdResult *result,
                             size_t index,
                             uint32_t *symbol,
                             size_t *timestep,
                             enum BdProvenance *provenance);

/**
 * Full result as one JSON object. Release with `bd_string_free`.
 *
 * # Safety
 * `result` must be a live handle; `out` must be writable.
 */
enum BdStatus bd_result_json(const struct BdResult *result, char **out);

/**
 * # Safety
 * `result` must be a handle from this library or NULL.
 */
void bd_result_free(struct BdResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BILLETDEC_H */
