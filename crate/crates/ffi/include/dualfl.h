#ifndef DUALFL_H
#define DUALFL_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum DualflStatus {
  DUALFL_STATUS_OK = 0,
  DUALFL_STATUS_CONFIG = 1,
  DUALFL_STATUS_INPUT = 2,
  DUALFL_STATUS_DOMAIN = 3,
  DUALFL_STATUS_CONSTRUCTION = 4,
  DUALFL_STATUS_CONJUGATE = 5,
  DUALFL_STATUS_PARTIAL_SOLVE = 6,
  DUALFL_STATUS_PARSE = 7,
  DUALFL_STATUS_DATA = 8,
  DUALFL_STATUS_REFERENCE = 9,
  DUALFL_STATUS_FIT = 10,
  DUALFL_STATUS_IO = 11,
  DUALFL_STATUS_NULL_POINTER = 12,
  DUALFL_STATUS_PANIC = 13,
  // The run finished but missed its convergence target.
  DUALFL_STATUS_TARGET_MISSED = 14,
} DualflStatus;

// Local stopping rule selector for [`DualflEngineConfig`].
typedef enum DualflStop {
  // Geometric gap schedule; `stop_param` is gamma.
  DUALFL_STOP_GAP_SMOOTH = 0,
  // Polynomial gap schedule; `stop_param` is gamma.
  DUALFL_STOP_GAP_NONSMOOTH = 1,
  // Constant gap bound `stop_param`.
  DUALFL_STOP_GAP_FIXED = 2,
  DUALFL_STOP_REL_ENERGY = 3,
  DUALFL_STOP_GRAD_NORM = 4,
} DualflStop;

// Opaque DualFL engine.
typedef struct DualflEngine DualflEngine;

// Opaque client family.
typedef struct DualflProblem DualflProblem;

typedef struct DualflEngineConfig {
  double nu;
  double rho;
  enum DualflStop stop;
  double stop_param;
  size_t max_local_iters;
  // Nonzero selects direct local solves where available.
  int32_t exact_solver;
  // Nonzero aborts the round when a local solve misses its criterion.
  int32_t abort_on_unmet;
} DualflEngineConfig;

// Summary of one completed round.
typedef struct DualflRoundInfo {
  size_t round;
  double beta;
  double max_gap;
  double zeta_sum_norm;
  size_t total_local_iters;
  size_t unmet_clients;
} DualflRoundInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on this thread.
const char *dualfl_last_error(void);

// Random quadratic family whose client Hessians all have extreme
// eigenvalues `mu` and `mu * kappa`.
//
// # Safety
// `out` must be a valid pointer to writable storage for one handle.
enum DualflStatus dualfl_problem_synthetic_quadratic(size_t clients,
                                                     size_t dim,
                                                     double mu,
                                                     double kappa,
                                                     double spread,
                                                     uint64_t seed,
                                                     struct DualflProblem **out);

// Quadratic family `f_j(x) = 1/2 x^T H_j x - l_j^T x`. `hessians` holds
// `clients` row-major `dim x dim` blocks, `linear` holds `clients` vectors.
//
// # Safety
// `hessians` must point to `clients * dim * dim` doubles, `linear` to
// `clients * dim` doubles, `out` to storage for one handle.
enum DualflStatus dualfl_problem_quadratic(size_t clients,
                                           size_t dim,
                                           const double *hessians,
                                           const double *linear,
                                           struct DualflProblem **out);

// # Safety
// `problem` must be null or a handle from a `dualfl_problem_*` constructor
// that has not been freed.
void dualfl_problem_free(struct DualflProblem *problem);

// Parameter dimension, or 0 for a null handle.
//
// # Safety
// `problem` must be null or a live handle.
size_t dualfl_problem_dim(const struct DualflProblem *problem);

// # Safety
// `problem` must be null or a live handle.
size_t dualfl_problem_clients(const struct DualflProblem *problem);

// Family constants: `mu` and `L` (NaN when unknown).
//
// # Safety
// `problem` must be a live handle; `mu` and `lipschitz` may be null.
enum DualflStatus dualfl_problem_constants(const struct DualflProblem *problem,
                                           double *mu,
                                           double *lipschitz);

// High-accuracy minimizer of the average cost, written to `theta` (length
// `len`, which must equal the dimension), and its energy.
//
// # Safety
// `problem` must be a live handle, `theta` must point to `len` doubles,
// `energy` may be null.
enum DualflStatus dualfl_problem_reference(const struct DualflProblem *problem,
                                           double *theta,
                                           size_t len,
                                           double *energy);

// Creates an engine over a copy of `problem`'s family. `threads <= 1` runs
// local solves sequentially.
//
// # Safety
// `problem` and `config` must be valid, `out` must point to storage for one
// handle.
enum DualflStatus dualfl_engine_new(const struct DualflProblem *problem,
                                    const struct DualflEngineConfig *config,
                                    size_t threads,
                                    struct DualflEngine **out);

// Executes one round; `info` may be null.
//
// # Safety
// `engine` must be a live handle; `info` null or writable.
enum DualflStatus dualfl_engine_step(struct DualflEngine *engine, struct DualflRoundInfo *info);

// Copies the current server iterate into `theta` (length must equal the
// dimension).
//
// # Safety
// `engine` must be a live handle and `theta` must point to `len` doubles.
enum DualflStatus dualfl_engine_theta(const struct DualflEngine *engine, double *theta, size_t len);

// # Safety
// `engine` must be null or a live handle.
void dualfl_engine_free(struct DualflEngine *engine);

// Runs the configuration file at `config_path` as the `run` command would
// and writes the trace to `out_path` (skipped when null). Returns
// `TargetMissed` when a configured target was not reached.
//
// # Safety
// `config_path` must be a NUL-terminated string; `out_path` null or
// NUL-terminated.
enum DualflStatus dualfl_run_config(const char *config_path, const char *out_path);

// Library version as a static NUL-terminated string.
const char *dualfl_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DUALFL_H */
