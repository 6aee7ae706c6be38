/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef NSMIX_H
#define NSMIX_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum NsmixStatus {
  NSMIX_STATUS_OK = 0,
  NSMIX_STATUS_NULL_POINTER = 1,
  NSMIX_STATUS_INVALID_ARGUMENT = 2,
  NSMIX_STATUS_DIMENSION_MISMATCH = 3,
  NSMIX_STATUS_CONFIG = 4,
  NSMIX_STATUS_BLOW_UP = 5,
  NSMIX_STATUS_CENSORING_OVERFLOW = 6,
  NSMIX_STATUS_IO = 7,
  NSMIX_STATUS_OUT_OF_RANGE = 8,
  NSMIX_STATUS_PANIC = 9,
  NSMIX_STATUS_INTERNAL = 10,
} NsmixStatus;

/**
 * Proximity rule for attempting a kernel coupling.
 */
typedef enum NsmixProximity {
  NSMIX_PROXIMITY_MIN_SCALE = 0,
  NSMIX_PROXIMITY_MAHALANOBIS = 1,
} NsmixProximity;

typedef struct NsmixCoupling NsmixCoupling;

typedef struct NsmixModel NsmixModel;

typedef struct NsmixNoise NsmixNoise;

typedef struct NsmixTrajectory NsmixTrajectory;

/**
 * Coupling parameters; `delta3` is ignored when not positive.
 */
typedef struct NsmixCouplingParams {
  double macro_length;
  double delta;
  double dt;
  double rho;
  size_t max_macro_steps;
  double delta3;
  enum NsmixProximity proximity;
} NsmixCouplingParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *nsmix_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len - 1` bytes). Returns the full message
 * length in bytes, excluding the terminator; 0 when the last call succeeded.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t nsmix_last_error_message(char *buf, size_t len);

/**
 * Shell model with `mu_n = mu1 * lambda^(2(n-1))`.
 *
 * # Safety
 * `out` must be valid for a pointer write.
 */
enum NsmixStatus nsmix_model_shell_new(size_t n_shells,
                                       double coupling,
                                       double mu1,
                                       double lambda,
                                       struct NsmixModel **out);

/**
 * Periodic torus model keeping the modes with `|k|^2 <= cutoff`, unforced.
 *
 * # Safety
 * `out` must be valid for a pointer write.
 */
enum NsmixStatus nsmix_model_torus_new(uint32_t cutoff, double viscosity, struct NsmixModel **out);

/**
 * # Safety
 * `model` must be null or a handle from `nsmix_model_*_new` not yet freed.
 */
void nsmix_model_free(struct NsmixModel *model);

/**
 * Number of modes; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t nsmix_model_dim(const struct NsmixModel *model);

/**
 * # Safety
 * `out` must be valid for `len` doubles; `len` must equal the model dimension.
 */
enum NsmixStatus nsmix_model_eigenvalues(const struct NsmixModel *model, double *out, size_t len);

/**
 * `out = B(u, v)`; all three arrays have length `len` = model dimension.
 *
 * # Safety
 * Pointers must be valid for `len` doubles.
 */
enum NsmixStatus nsmix_model_bilinear(const struct NsmixModel *model,
                                      const double *u,
                                      const double *v,
                                      double *out,
                                      size_t len);

/**
 * Constant diagonal noise `b_n = mu_n^(-s/2)`.
 *
 * # Safety
 * `model` must be a live handle; `out` valid for a pointer write.
 */
enum NsmixStatus nsmix_noise_constant_new(const struct NsmixModel *model,
                                          double s,
                                          struct NsmixNoise **out);

/**
 * State-dependent diagonal noise with modulation amplitude in `[0, 1/2]`.
 *
 * # Safety
 * `model` must be a live handle; `out` valid for a pointer write.
 */
enum NsmixStatus nsmix_noise_modulated_new(const struct NsmixModel *model,
                                           double s,
                                           double modulation,
                                           struct NsmixNoise **out);

/**
 * # Safety
 * `noise` must be null or a live handle.
 */
void nsmix_noise_free(struct NsmixNoise *noise);

/**
 * Simulates one path from `x0` over `[0, horizon]` with the semi-implicit
 * scheme. The path is a pure function of `(seed, stream)`.
 *
 * # Safety
 * Handles must be live; `x0` valid for `len` doubles; `out` for a pointer write.
 */
enum NsmixStatus nsmix_simulate(const struct NsmixModel *model,
                                const struct NsmixNoise *noise,
                                const double *x0,
                                size_t len,
                                double horizon,
                                double dt,
                                uint64_t seed,
                                uint64_t stream,
                                struct NsmixTrajectory **out);

/**
 * # Safety
 * `traj` must be null or a live handle.
 */
void nsmix_trajectory_free(struct NsmixTrajectory *traj);

/**
 * Number of stored grid states (including the initial one); 0 for null.
 *
 * # Safety
 * `traj` must be null or a live handle.
 */
size_t nsmix_trajectory_len(const struct NsmixTrajectory *traj);

/**
 * Step at which the path blew up, or -1 if it stayed finite.
 *
 * # Safety
 * `traj` must be a live handle; `out` valid for a write.
 */
enum NsmixStatus nsmix_trajectory_blow_up_step(const struct NsmixTrajectory *traj, int64_t *out);

/**
 * Copies grid state `index` and its time.
 *
 * # Safety
 * `traj` must be a live handle; `state` valid for `len` doubles; `time` null or valid.
 */
enum NsmixStatus nsmix_trajectory_state(const struct NsmixTrajectory *traj,
                                        size_t index,
                                        double *state,
                                        size_t len,
                                        double *time);

/**
 * Runs one coupled chain from `(x1, x2)`. Blow-up is recorded in the
 * result, not reported as an error.
 *
 * # Safety
 * Handles and `params` must be live; `x1`, `x2` valid for `len` doubles.
 */
enum NsmixStatus nsmix_couple(const struct NsmixModel *model,
                              const struct NsmixNoise *noise,
                              const struct NsmixCouplingParams *params,
                              const double *x1,
                              const double *x2,
                              size_t len,
                              uint64_t seed,
                              uint64_t stream,
                              struct NsmixCoupling **out);

/**
 * # Safety
 * `rec` must be null or a live handle.
 */
void nsmix_coupling_free(struct NsmixCoupling *rec);

/**
 * Macro step at which the chains met, or -1.
 *
 * # Safety
 * `rec` must be a live handle; `out` valid for a write.
 */
enum NsmixStatus nsmix_coupling_meeting_step(const struct NsmixCoupling *rec, int64_t *out);

/**
 * First return time to the small ball, or -1 when not observed.
 *
 * # Safety
 * `rec` must be a live handle; `out` valid for a write.
 */
enum NsmixStatus nsmix_coupling_tau(const struct NsmixCoupling *rec, double *out);

/**
 * Number of recorded macro steps (rows); 0 for null.
 *
 * # Safety
 * `rec` must be null or a live handle.
 */
size_t nsmix_coupling_steps(const struct NsmixCoupling *rec);

/**
 * Copies both chain states at macro step `index` (0 = initial pair).
 *
 * # Safety
 * `rec` must be a live handle; `x1`, `x2` valid for `len` doubles.
 */
enum NsmixStatus nsmix_coupling_states(const struct NsmixCoupling *rec,
                                       size_t index,
                                       double *x1,
                                       double *x2,
                                       size_t len);

/**
 * Runs a CLI command (`"mix"`, `"simulate"`, ...) from a config file.
 * `out_dir` may be null to keep the configured directory; `threads` 0
 * uses the available parallelism.
 *
 * # Safety
 * String arguments must be NUL-terminated or null where allowed.
 */
enum NsmixStatus nsmix_run_command(const char *command,
                                   const char *config_path,
                                   const char *out_dir,
                                   size_t threads);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NSMIX_H */
