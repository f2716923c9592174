#ifndef WBPLAN_H
#define WBPLAN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Solver outcome reported by [`wbplan_control_step`].
 */
typedef enum WbQpStatus {
  WB_QP_STATUS_OPTIMAL = 0,
  WB_QP_STATUS_MAX_ITERATIONS = 1,
  WB_QP_STATUS_INFEASIBLE = 2,
} WbQpStatus;

typedef enum WbStatus {
  WB_STATUS_OK = 0,
  WB_STATUS_NULL_POINTER = 1,
  WB_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Unreadable or malformed input file.
   */
  WB_STATUS_CONFIG = 3,
  WB_STATUS_RUNTIME = 4,
  WB_STATUS_PANIC = 5,
} WbStatus;

typedef struct WbController WbController;

typedef struct WbEnv WbEnv;

typedef struct WbModel WbModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message into `buf` (NUL-terminated, truncated to
 * `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t wbplan_last_error(char *buf, size_t len);

/**
 * Built-in mobile manipulator model.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum WbStatus wbplan_model_new_default(struct WbModel **out);

/**
 * Loads a robot model file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum WbStatus wbplan_model_load(const char *path, struct WbModel **out);

/**
 * # Safety
 * `model` must come from a `wbplan_model_*` constructor, or be null.
 */
void wbplan_model_free(struct WbModel *model);

/**
 * Number of joint velocities (base ω, base v, arm joints).
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum WbStatus wbplan_model_dof(const struct WbModel *model, size_t *out);

/**
 * Whole-body Jacobian, row-major `6 × dof`. `q` is `(x, y, theta, arm…)`
 * with `dof + 1` entries.
 *
 * # Safety
 * Arrays must hold the stated number of elements.
 */
enum WbStatus wbplan_jacobian(const struct WbModel *model,
                              const double *q,
                              size_t q_len,
                              double *out,
                              size_t out_len);

/**
 * Controller with default settings.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum WbStatus wbplan_controller_new_default(struct WbController **out);

/**
 * # Safety
 * `ctrl` must come from a `wbplan_controller_*` constructor, or be null.
 */
void wbplan_controller_free(struct WbController *ctrl);

/**
 * One control tick. `distances` holds `rows` clearances and `gradients`
 * their row-major `rows × dof` gradients. Writes `dof` joint velocities to
 * `qdot_out` and the solver outcome to `qp_status`.
 *
 * # Safety
 * Arrays must hold the stated number of elements.
 */
enum WbStatus wbplan_control_step(const struct WbController *ctrl,
                                  const struct WbModel *model,
                                  const double *q,
                                  size_t q_len,
                                  const double *twist,
                                  const double *distances,
                                  const double *gradients,
                                  size_t rows,
                                  double dev_norm,
                                  double *qdot_out,
                                  enum WbQpStatus *qp_status);

/**
 * Precision-weighted fusion of two Gaussian value estimates.
 *
 * # Safety
 * Output pointers must be valid.
 */
enum WbStatus wbplan_bayes_fuse(double m1,
                                double s1,
                                double m2,
                                double s2,
                                double *mean,
                                double *std);

/**
 * Servo-driven environment on a scene file, or on procedural scene
 * `scene_index` when `scene_path` is null. `mode` is a planner mode name.
 *
 * # Safety
 * Strings must be NUL-terminated or null; `out` must be valid.
 */
enum WbStatus wbplan_env_new(const char *scene_path,
                             size_t scene_index,
                             const char *mode,
                             struct WbEnv **out);

/**
 * # Safety
 * `env` must come from [`wbplan_env_new`], or be null.
 */
void wbplan_env_free(struct WbEnv *env);

/**
 * Action length the environment expects.
 *
 * # Safety
 * `env` and `out` must be valid.
 */
enum WbStatus wbplan_env_action_dim(const struct WbEnv *env, size_t *out);

/**
 * Starts a seeded episode; `obs_len` receives the state-vector length.
 *
 * # Safety
 * `env` and `obs_len` must be valid.
 */
enum WbStatus wbplan_env_reset(struct WbEnv *env, uint64_t seed, size_t *obs_len);

/**
 * Position-servo twist toward the goal, 6 entries.
 *
 * # Safety
 * `env` must be reset and `out` must hold 6 entries.
 */
enum WbStatus wbplan_env_servo_action(const struct WbEnv *env, double *out);

/**
 * Advances one tick. `done` is set to 1 on success, collision or horizon.
 *
 * # Safety
 * Arrays must hold the stated number of elements; `env` must be reset.
 */
enum WbStatus wbplan_env_step(struct WbEnv *env,
                              const double *action,
                              size_t action_len,
                              double *reward,
                              int32_t *done,
                              int32_t *success);

/**
 * Current state vector (proprioception and goal offset).
 *
 * # Safety
 * `out` must hold `len` entries, with `len` as reported by reset.
 */
enum WbStatus wbplan_env_state(const struct WbEnv *env, double *out, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WBPLAN_H */
