#ifndef LOCO_ADMM_H
#define LOCO_ADMM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LocoPlanner {
  LOCO_PLANNER_DISTRIBUTED = 0,
  LOCO_PLANNER_CENTRALIZED = 1,
} LocoPlanner;

typedef enum LocoStatus {
  LOCO_STATUS_OK = 0,
  LOCO_STATUS_NULL_POINTER = 1,
  LOCO_STATUS_INVALID_ARGUMENT = 2,
  LOCO_STATUS_CONFIG = 3,
  LOCO_STATUS_FINISHED = 4,
  LOCO_STATUS_ABORTED = 5,
  LOCO_STATUS_IO = 6,
  LOCO_STATUS_PANIC = 7,
} LocoStatus;

/**
 * Validated scenario.
 */
typedef struct LocoScenario LocoScenario;

/**
 * Running closed-loop simulation.
 */
typedef struct LocoSimulation LocoSimulation;

/**
 * Outcome of one control step.
 */
typedef struct LocoStepInfo {
  size_t step;
  double time;
  double payload_position[3];
  double payload_euler[3];
  double position_error;
  double criterion;
  size_t admm_iterations;
  bool tolerance_met;
} LocoStepInfo;

/**
 * Summary of a finished or partial run.
 */
typedef struct LocoMetrics {
  size_t steps;
  bool completed;
  double final_position_error;
  double final_attitude_error;
  double median_criterion;
  double tolerance_rate;
  double median_wall_time;
  double median_critical_path_time;
  size_t friction_violations;
  size_t barrier_violations;
  size_t momentum_violations;
  size_t failed_solves;
} LocoMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *loco_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *loco_version(void);

/**
 * Loads a built-in scenario for `robots` robots.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LocoStatus loco_scenario_builtin(const char *name, size_t robots, struct LocoScenario **out);

/**
 * Parses a scenario from TOML text.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LocoStatus loco_scenario_from_toml(const char *text, struct LocoScenario **out);

/**
 * Number of robots in the scenario.
 *
 * # Safety
 * `scenario` must come from a scenario constructor; `out` must be valid.
 */
enum LocoStatus loco_scenario_robots(const struct LocoScenario *scenario, size_t *out);

/**
 * # Safety
 * `scenario` must be null or come from a scenario constructor, freed at most once.
 */
void loco_scenario_free(struct LocoScenario *scenario);

/**
 * Starts a simulation. `planner` is a [`LocoPlanner`] value; a non-positive
 * `duration` uses the scenario's own.
 *
 * # Safety
 * `scenario` must come from a scenario constructor; `out` must be valid.
 */
enum LocoStatus loco_simulation_new(const struct LocoScenario *scenario,
                                    uint32_t planner,
                                    double duration,
                                    struct LocoSimulation **out);

/**
 * Advances one control step. Returns `Finished` once the duration is covered and
 * `Aborted` when the run stopped on a failure. `info` may be null.
 *
 * # Safety
 * `sim` must come from [`loco_simulation_new`]; `info` must be null or valid.
 */
enum LocoStatus loco_simulation_step(struct LocoSimulation *sim, struct LocoStepInfo *info);

/**
 * Steps until the run finishes. Returns `Ok` on completion or `Aborted`.
 *
 * # Safety
 * `sim` must come from [`loco_simulation_new`].
 */
enum LocoStatus loco_simulation_run(struct LocoSimulation *sim);

/**
 * Copies the current world state: 12 payload values then 24 per robot.
 * `len` is the capacity of `buf`; `written` receives the required length.
 *
 * # Safety
 * `sim` must come from [`loco_simulation_new`]; `buf` must hold `len` doubles.
 */
enum LocoStatus loco_simulation_state(const struct LocoSimulation *sim,
                                      double *buf,
                                      size_t len,
                                      size_t *written);

/**
 * Metrics over the steps taken so far. `warmup` seconds are skipped for the tolerance rate.
 *
 * # Safety
 * `sim` must come from [`loco_simulation_new`]; `out` must be valid.
 */
enum LocoStatus loco_simulation_metrics(const struct LocoSimulation *sim,
                                        double warmup,
                                        struct LocoMetrics *out);

/**
 * Writes the deterministic trace as JSON lines, one record per step.
 *
 * # Safety
 * `sim` must come from [`loco_simulation_new`]; `path` must be a NUL-terminated string.
 */
enum LocoStatus loco_simulation_write_trace(const struct LocoSimulation *sim, const char *path);

/**
 * # Safety
 * `sim` must be null or come from [`loco_simulation_new`], freed at most once.
 */
void loco_simulation_free(struct LocoSimulation *sim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LOCO_ADMM_H */
