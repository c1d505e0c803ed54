#ifndef LATENT_DESIGN_H
#define LATENT_DESIGN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LdStatus {
  LD_STATUS_OK = 0,
  LD_STATUS_NULL_POINTER = 1,
  LD_STATUS_INVALID_ARGUMENT = 2,
  LD_STATUS_BUFFER_TOO_SMALL = 3,
  LD_STATUS_IO = 4,
  LD_STATUS_PARSE = 5,
  LD_STATUS_CHECKPOINT = 6,
  LD_STATUS_DIMENSION = 7,
  LD_STATUS_NUMERIC = 8,
  LD_STATUS_DATA = 9,
  LD_STATUS_PANIC = 10,
} LdStatus;

/**
 * The trained GCN and prediction heads loaded from a checkpoint directory.
 */
typedef struct LdModels LdModels;

/**
 * A synthetic world with its planted archetypes and oracle.
 */
typedef struct LdWorld LdWorld;

/**
 * Energy weights; see [`ld_coeffs_default`].
 */
typedef struct LdCoeffs {
  /**
   * Weights of `p_B` and `g_h(dsx)`.
   */
  double alpha[2];
  /**
   * Weights of `g_q(logP)`, QED, SAS and toxicity.
   */
  double gamma[4];
  double dsx_floor;
  double logp_window[2];
} LdCoeffs;

typedef struct LdOptConfig {
  size_t steps;
  double learning_rate;
  uint64_t seed;
} LdOptConfig;

typedef struct LdEnergyReport {
  double total;
  double p_b;
  double dsx_hat;
  double log_p;
  double qed;
  double sas;
  double tox;
} LdEnergyReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *ld_last_error(void);

/**
 * Static name of a status code.
 */
const char *ld_status_name(enum LdStatus status);

/**
 * `max(−250, x)`.
 */
double ld_g_h(double x);

/**
 * The logP window, 1 at 2.5 and 0 at 0 and 5.
 */
double ld_g_q(double x);

struct LdCoeffs ld_coeffs_default(void);

struct LdOptConfig ld_opt_config_default(void);

/**
 * Builds a world from default settings and `seed`.
 *
 * # Safety
 * `out` must be a valid pointer to write a handle to.
 */
enum LdStatus ld_world_new(uint64_t seed, struct LdWorld **out);

/**
 * Rebuilds the world recorded in a `world.json` manifest.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LdStatus ld_world_load(const char *path_, struct LdWorld **out);

/**
 * # Safety
 * `world` must be null or a handle from `ld_world_new`/`ld_world_load`
 * that has not been freed.
 */
void ld_world_free(struct LdWorld *world);

/**
 * Latent width, or 0 for a null handle.
 *
 * # Safety
 * `world` must be null or a live handle.
 */
size_t ld_world_latent_dim(const struct LdWorld *world);

/**
 * Number of archetypes, or 0 for a null handle.
 *
 * # Safety
 * `world` must be null or a live handle.
 */
size_t ld_world_archetype_count(const struct LdWorld *world);

/**
 * Writes the planted binder of archetype `k` into `out[0..latent_dim]`.
 *
 * # Safety
 * `world` must be a live handle and `out` must hold `out_len` doubles.
 */
enum LdStatus ld_world_center(const struct LdWorld *world, size_t k, double *out, size_t out_len);

/**
 * Noiseless oracle score of `c` against archetype `k`.
 *
 * # Safety
 * `world` must be a live handle, `c` must hold `len` doubles.
 */
enum LdStatus ld_world_oracle_dsx(const struct LdWorld *world,
                                  const double *c,
                                  size_t len,
                                  size_t k,
                                  double *out);

/**
 * Loads the five checkpoints written by `latent-design train`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LdStatus ld_models_load(const char *dir, struct LdModels **out);

/**
 * # Safety
 * `models` must be null or a live handle from `ld_models_load`.
 */
void ld_models_free(struct LdModels *models);

/**
 * Latent width, or 0 for a null handle.
 *
 * # Safety
 * `models` must be null or a live handle.
 */
size_t ld_models_latent_dim(const struct LdModels *models);

/**
 * Site signature width, or 0 for a null handle.
 *
 * # Safety
 * `models` must be null or a live handle.
 */
size_t ld_models_signature_dim(const struct LdModels *models);

/**
 * Site signature of a binding site with `n_atoms` atoms.
 *
 * `elements` and `residues` hold one vocabulary index per atom and
 * `positions` holds `3 * n_atoms` coordinates in Å.
 *
 * # Safety
 * `models` must be a live handle; the arrays must have the sizes above and
 * `out` must hold `out_len` doubles.
 */
enum LdStatus ld_models_site_signature(const struct LdModels *models,
                                       size_t n_atoms,
                                       const uint32_t *elements,
                                       const uint32_t *residues,
                                       const double *positions,
                                       double *out,
                                       size_t out_len);

/**
 * Predicted binding probability and DSX for a ligand and site signature.
 *
 * # Safety
 * `models` must be a live handle; `c` and `p` must hold `c_len` and
 * `p_len` doubles.
 */
enum LdStatus ld_models_predict_affinity(const struct LdModels *models,
                                         const double *c,
                                         size_t c_len,
                                         const double *p,
                                         size_t p_len,
                                         double *out_p_b,
                                         double *out_dsx);

/**
 * Design energy of `c` for site `p`. A null `coeffs` uses the defaults.
 *
 * # Safety
 * `models` must be a live handle; `c` and `p` must hold `c_len` and
 * `p_len` doubles; `coeffs` must be null or valid.
 */
enum LdStatus ld_models_energy(const struct LdModels *models,
                               const double *c,
                               size_t c_len,
                               const double *p,
                               size_t p_len,
                               const struct LdCoeffs *coeffs_,
                               struct LdEnergyReport *out);

/**
 * Optimizes a ligand for site `p` from the direct-mapper start and writes
 * the final point to `out_c`.
 *
 * When the energy turns non-finite the call returns `LD_STATUS_NUMERIC`
 * and `out_c` holds the last point with a finite energy, if any.
 *
 * # Safety
 * `models` must be a live handle; `p` must hold `p_len` doubles; `coeffs`
 * and `config` must be null or valid; `out_c` must hold `out_len` doubles
 * and `out_report` must be null or valid.
 */
enum LdStatus ld_models_optimize(const struct LdModels *models,
                                 const double *p,
                                 size_t p_len,
                                 const struct LdCoeffs *coeffs_,
                                 const struct LdOptConfig *config,
                                 double *out_c,
                                 size_t out_len,
                                 struct LdEnergyReport *out_report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LATENT_DESIGN_H */
