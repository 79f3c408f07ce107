#ifndef NEGMINE_H
#define NEGMINE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum NmStatus {
  NM_OK = 0,
  /**
   * A required pointer was null or a string was not UTF-8.
   */
  NM_ERR_ARGUMENT = 1,
  NM_ERR_CONFIG = 2,
  NM_ERR_IO = 3,
  NM_ERR_FORMAT = 4,
  NM_ERR_DOMAIN = 5,
  NM_ERR_DEGENERATE = 6,
  NM_ERR_STATE = 7,
  NM_ERR_NUMERICAL = 8,
  /**
   * Any other library error.
   */
  NM_ERR_OTHER = 9,
  NM_ERR_PANIC = 10,
} NmStatus;

/**
 * Opaque world handle.
 */
typedef struct NmWorld NmWorld;

/**
 * Generation parameters for [`nm_world_generate`]. Fill with
 * [`nm_world_config_default`] before changing fields.
 */
typedef struct NmWorldConfig {
  size_t n_concepts;
  size_t n_images;
  size_t n_texts;
  size_t n_eval_images;
  size_t d_latent;
  size_t d_img;
  size_t k_text;
  size_t vocab;
  double noise;
  size_t max_concepts_per_image;
} NmWorldConfig;

/**
 * Compatibility-relation counts of a world.
 */
typedef struct NmRelationStats {
  size_t n_images;
  size_t n_texts;
  /**
   * Compatible (image, text) pairs.
   */
  size_t relation;
  /**
   * Labeled positive pairs.
   */
  size_t positives;
  double rho;
  double kappa;
  /**
   * Probability that a uniformly drawn non-positive pair is compatible.
   */
  double fn_probability;
} NmRelationStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *nm_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *nm_version(void);

/**
 * Writes the default world configuration to `out`.
 *
 * # Safety
 * `out` must be null or point to writable memory for one `NmWorldConfig`.
 */
enum NmStatus nm_world_config_default(struct NmWorldConfig *out);

/**
 * Generates a world. `cfg` may be null for the defaults. On success `*out`
 * owns a handle to release with [`nm_world_free`].
 *
 * # Safety
 * `cfg` must be null or valid; `out` must be a valid pointer.
 */
enum NmStatus nm_world_generate(const struct NmWorldConfig *cfg,
                                uint64_t seed,
                                struct NmWorld **out);

/**
 * Loads a world saved as JSON lines.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum NmStatus nm_world_read(const char *path, struct NmWorld **out);

/**
 * Saves a world as JSON lines.
 *
 * # Safety
 * `world` must come from this library; `path` must be a NUL-terminated string.
 */
enum NmStatus nm_world_write(const struct NmWorld *world, const char *path);

/**
 * Releases a world handle. Null is ignored.
 *
 * # Safety
 * `world` must be null or a handle from this library not yet freed.
 */
void nm_world_free(struct NmWorld *world);

/**
 * Relation statistics over every image and text of the world.
 *
 * # Safety
 * `world` must come from this library; `out` must be a valid pointer.
 */
enum NmStatus nm_world_relation_stats(const struct NmWorld *world, struct NmRelationStats *out);

/**
 * Copies the world's hex SHA-256 (64 characters plus NUL) into `buf`.
 *
 * # Safety
 * `buf` must point to at least `len` writable bytes.
 */
enum NmStatus nm_world_hash(const struct NmWorld *world, char *buf, size_t len);

/**
 * Probability that a uniform non-positive pair is a false negative, given
 * relation density `rho` and positive fraction `kappa`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum NmStatus nm_fn_probability(double rho, double kappa, double *out);

/**
 * Among the candidates `unselected[0..m]` (indices into `row[0..n]`),
 * returns in `*out` the one at nearest rank `q` by ascending value.
 *
 * # Safety
 * `row` must hold `n` doubles, `unselected` `m` indices, `out` be valid.
 */
enum NmStatus nm_quantile_select(const double *row,
                                 size_t n,
                                 const size_t *unselected,
                                 size_t m,
                                 double q,
                                 size_t *out);

/**
 * Trains on `world` and writes the run directory `out_dir`. `config_toml`
 * is a TOML document in the CLI's format, or null for the defaults.
 *
 * # Safety
 * Pointers must be valid NUL-terminated strings (or null where allowed).
 */
enum NmStatus nm_train(const struct NmWorld *world, const char *config_toml, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NEGMINE_H */
