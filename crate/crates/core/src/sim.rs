//! Idealized rollout simulator and receding-horizon loop.
//!
//! Each control step re-plans from the measured world state, applies only the first
//! planned inputs and integrates the joint payload-robot dynamics, which use the robot
//! wrenches directly and never read the planner's wrench copies.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admm::{solve_window, warm_start_shift, AdmmSettings, AdmmState};
use crate::centralized::{build_stacked_ocp, solve_centralized, split_trajectory, stack_trajectories};
use crate::constraints::friction_cone;
use crate::model::rotation::rotation;
use crate::model::{foot_offset, step_backward_euler, ModelError, StackedDynamics, EULER, POS, VEL};
use crate::problem::{stack_controls, stack_state, DistributedWindow, Scenario, Window};
use crate::sqp::{SqpSettings, Trajectory};
use crate::stats::Summary;

/// Consecutive failed solves tolerated before a run aborts.
pub const MAX_FAILED_SOLVES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Planner {
    Distributed,
    Centralized,
}

impl fmt::Display for Planner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Planner::Distributed => "distributed",
            Planner::Centralized => "centralized",
        })
    }
}

impl FromStr for Planner {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "distributed" => Ok(Planner::Distributed),
            "centralized" => Ok(Planner::Centralized),
            other => Err(format!("unknown planner `{other}` (expected distributed or centralized)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub payload: DVector<f64>,
    pub robots: Vec<DVector<f64>>,
    pub time: f64,
}

impl WorldState {
    pub fn initial(scenario: &Scenario) -> Self {
        let (payload, robots) = scenario.initial_world();
        Self {
            payload,
            robots,
            time: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.payload.iter().chain(self.robots.iter().flat_map(|r| r.iter())).all(|v| v.is_finite())
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("rollout failed at t = {time}: {source}")]
    Rollout { time: f64, source: ModelError },
}

/// Integrates the ground-truth joint dynamics over one control step.
pub fn rollout_step(world: &WorldState, controls: &[DVector<f64>], scenario: &Scenario, dt: f64) -> Result<WorldState, ModelError> {
    let dynamics = StackedDynamics::new(scenario.payload.clone(), vec![scenario.robot.clone(); scenario.robots], scenario.n_feet);
    let x = stack_state(&world.payload, &world.robots);
    let u = stack_controls(controls);
    let next = step_backward_euler(&dynamics, 0, &x, &u, dt)?;
    let nx = scenario.robot_state_dim();
    Ok(WorldState {
        payload: next.rows(0, 12).into_owned(),
        robots: (0..scenario.robots).map(|i| next.rows(12 + i * nx, nx).into_owned()).collect(),
        time: world.time + dt,
    })
}

/// `|d(total linear momentum)/dt - sum of foot forces - M g|_inf` over one step.
pub fn momentum_residual(before: &WorldState, after: &WorldState, controls: &[DVector<f64>], scenario: &Scenario, dt: f64) -> f64 {
    let lay = scenario.layout();
    let v = |x: &DVector<f64>| Vector3::new(x[VEL], x[VEL + 1], x[VEL + 2]);
    let mut dp = (v(&after.payload) - v(&before.payload)) * scenario.payload.mass / dt;
    let mut external = scenario.payload.gravity * scenario.payload.mass;
    for (i, u) in controls.iter().enumerate() {
        dp += (v(&after.robots[i]) - v(&before.robots[i])) * scenario.robot.mass / dt;
        external += scenario.robot.gravity * scenario.robot.mass;
        for j in 0..scenario.n_feet {
            let o = lay.force(j);
            external += Vector3::new(u[o], u[o + 1], u[o + 2]);
        }
    }
    (dp - external).amax()
}

/// Smallest obstacle barrier value over the payload and all robot bases.
pub fn min_obstacle_barrier(world: &WorldState, scenario: &Scenario) -> Option<f64> {
    let cfg = &scenario.config;
    let mut bodies = vec![(&world.payload, cfg.payload.footprint_radius)];
    bodies.extend(world.robots.iter().map(|r| (r, cfg.robot.body_radius)));
    cfg.obstacles
        .iter()
        .flat_map(|o| {
            bodies.iter().map(move |(x, rb)| {
                let p = Vector2::new(x[POS], x[POS + 1]);
                crate::constraints::obstacle_distance(&p, o, *rb)
            })
        })
        .reduce(f64::min)
}

/// Largest friction-cone residual over stance feet at the applied controls.
pub fn max_stance_friction(world: &WorldState, window: &Window, controls: &[DVector<f64>], scenario: &Scenario) -> f64 {
    let lay = scenario.layout();
    let mut worst = f64::NEG_INFINITY;
    for (i, u) in controls.iter().enumerate() {
        let x = &world.robots[i];
        for j in 0..scenario.n_feet {
            if !window.gait.contact[0][j] {
                continue;
            }
            let o = foot_offset(j);
            let n = scenario.terrain.normal(x[o], x[o + 1]);
            let f = Vector3::new(u[lay.force(j)], u[lay.force(j) + 1], u[lay.force(j) + 2]);
            let c = friction_cone(&f, &n, scenario.terrain.mu);
            worst = worst.max(c.values[0]).max(c.values[1]);
        }
    }
    worst
}

/// Rotation angle between two ZYX attitudes, rad.
pub fn attitude_error(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let r = rotation(a).transpose() * rotation(b);
    ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
}

/// Deterministic per-step record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Time at the end of the step, s.
    pub time: f64,
    #[serde(with = "flat")]
    pub payload: DVector<f64>,
    #[serde(with = "flat_list")]
    pub robots: Vec<DVector<f64>>,
    #[serde(with = "flat_list")]
    pub controls: Vec<DVector<f64>>,
    pub reference_position: Vector3<f64>,
    pub reference_euler: Vector3<f64>,
    pub position_error: f64,
    pub attitude_error: f64,
    /// Criterion after the initial guess and after every ADMM iteration.
    pub criterion_history: Vec<f64>,
    pub criterion: f64,
    pub admm_iterations: usize,
    pub tolerance_met: bool,
    pub solve_failed: bool,
    pub max_stance_friction: f64,
    pub min_obstacle_barrier: Option<f64>,
    pub momentum_residual: f64,
    /// Paired criteria after a fixed two-iteration solve from warm and cold starts.
    pub warm_two_iteration: Option<f64>,
    pub cold_two_iteration: Option<f64>,
}

/// Dynamic vectors as plain number arrays.
mod flat {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Vec::<f64>::deserialize(d).map(DVector::from_vec)
    }
}

mod flat_list {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[DVector<f64>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| x.as_slice()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DVector<f64>>, D::Error> {
        Vec::<Vec<f64>>::deserialize(d).map(|v| v.into_iter().map(DVector::from_vec).collect())
    }
}

/// Wall-clock record of one solve, kept out of the deterministic trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub step: usize,
    pub wall_time: f64,
    pub critical_path_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub scenario: String,
    pub planner: Planner,
    pub robots: usize,
    pub epsilon: f64,
    pub records: Vec<StepRecord>,
    pub timings: Vec<StepTiming>,
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub duration: f64,
    pub control_dt: f64,
    /// Also run paired two-iteration warm and cold solves each window.
    pub compare_cold_start: bool,
}

impl SimOptions {
    pub fn from_scenario(scenario: &Scenario) -> Self {
        Self {
            duration: scenario.config.sim.duration,
            control_dt: scenario.config.sim.control_dt,
            compare_cold_start: false,
        }
    }
}

pub fn admm_settings(scenario: &Scenario) -> AdmmSettings {
    let s = &scenario.config.solver;
    AdmmSettings {
        max_iters: s.max_admm_iters,
        epsilon: s.epsilon,
        parallel: s.parallel,
        sqp: SqpSettings {
            max_iters: s.max_sqp_iters,
            project: s.feasibility_projection,
            ..SqpSettings::default()
        },
    }
}

/// Rolled-out initial guess from the measured state, zero duals.
pub fn cold_start(scenario: &Scenario, window: &Window, world: &WorldState) -> AdmmState {
    let guess = scenario.initial_guess(window, &world.payload, &world.robots);
    AdmmState::new(guess, scenario.config.solver.rho)
}

enum PlannerMemory {
    Distributed(Option<AdmmState>),
    Centralized(Option<Trajectory>),
}

struct Plan {
    controls: Vec<DVector<f64>>,
    criterion_history: Vec<f64>,
    criterion: f64,
    admm_iterations: usize,
    tolerance_met: bool,
    wall_time: f64,
    critical_path_time: f64,
    warm2: Option<f64>,
    cold2: Option<f64>,
}

fn plan_distributed(
    scenario: &Scenario,
    window: &Window,
    world: &WorldState,
    memory: &mut Option<AdmmState>,
    options: &SimOptions,
) -> Result<Plan, String> {
    let mut settings = admm_settings(scenario);
    if memory.is_none() {
        settings.sqp.max_iters = settings.sqp.max_iters.max(scenario.config.solver.initial_sqp_iters);
    }
    let problem = DistributedWindow {
        scenario,
        window,
        payload_x0: world.payload.clone(),
        robot_x0: world.robots.clone(),
    };
    let init = match memory {
        Some(prev) => {
            let mut init = warm_start_shift(prev, options.control_dt, scenario.dt());
            for traj in &mut init.trajectories.robots {
                window.match_contacts(scenario, &mut traj.controls, 0);
            }
            init
        }
        None => cold_start(scenario, window, world),
    };
    let (mut warm2, mut cold2) = (None, None);
    if options.compare_cold_start {
        let fixed = AdmmSettings {
            max_iters: 2,
            epsilon: 0.0,
            ..settings
        };
        let run = |s: AdmmState| solve_window(&problem, s, &fixed).ok().map(|(_, r)| r.criterion);
        warm2 = run(init.clone());
        cold2 = run(cold_start(scenario, window, world));
    }
    match solve_window(&problem, init, &settings) {
        Ok((state, report)) => {
            let controls = state.trajectories.robots.iter().map(|t| t.controls[0].clone()).collect();
            let mut history = vec![report.initial_criterion];
            history.extend(report.iterations.iter().map(|i| i.criterion));
            *memory = Some(state);
            Ok(Plan {
                controls,
                criterion_history: history,
                criterion: report.criterion,
                admm_iterations: report.iterations.len(),
                tolerance_met: report.tolerance_met,
                wall_time: report.wall_time,
                critical_path_time: report.critical_path_time,
                warm2,
                cold2,
            })
        }
        Err(failure) => {
            *memory = Some(*failure.state);
            Err(failure.error.to_string())
        }
    }
}

fn plan_centralized(
    scenario: &Scenario,
    window: &Window,
    world: &WorldState,
    memory: &mut Option<Trajectory>,
    options: &SimOptions,
) -> Result<Plan, String> {
    let x0 = stack_state(&world.payload, &world.robots);
    let ocp = build_stacked_ocp(scenario, window, &x0);
    let init = match memory {
        Some(prev) => {
            let mut init = crate::admm::shift_single(prev, options.control_dt, scenario.dt());
            for i in 0..scenario.robots {
                window.match_contacts(scenario, &mut init.controls, i * scenario.layout().dim());
            }
            init
        }
        None => stack_trajectories(&cold_start(scenario, window, world).trajectories),
    };
    let solver = &scenario.config.solver;
    let settings = SqpSettings {
        max_iters: if memory.is_none() {
            solver.max_sqp_iters.max(solver.initial_sqp_iters)
        } else {
            solver.max_sqp_iters
        },
        project: solver.feasibility_projection,
        ..SqpSettings::default()
    };
    let report = solve_centralized(&ocp, &init, &settings).map_err(|e| e.to_string())?;
    let split = split_trajectory(scenario, &report.trajectory);
    let controls = split.robots.iter().map(|t| t.controls[0].clone()).collect();
    *memory = Some(report.trajectory);
    Ok(Plan {
        controls,
        criterion_history: vec![0.0],
        criterion: 0.0,
        admm_iterations: 0,
        tolerance_met: true,
        wall_time: report.wall_time,
        critical_path_time: report.wall_time,
        warm2: None,
        cold2: None,
    })
}

/// Receding-horizon loop: observe, warm start, solve, apply the first inputs, integrate.
///
/// A failed solve re-applies the last valid inputs; the run aborts after
/// `MAX_FAILED_SOLVES` consecutive failures or on an integration failure.
/// Receding-horizon loop that advances one control step at a time.
pub struct Simulation {
    scenario: Scenario,
    options: SimOptions,
    steps: usize,
    world: WorldState,
    memory: PlannerMemory,
    last_controls: Option<Vec<DVector<f64>>>,
    failures: usize,
    trace: RunTrace,
}

impl Simulation {
    pub fn new(scenario: &Scenario, planner: Planner, options: &SimOptions) -> Self {
        let steps = (options.duration / options.control_dt).round() as usize;
        Self {
            scenario: scenario.clone(),
            options: *options,
            steps,
            world: WorldState::initial(scenario),
            memory: match planner {
                Planner::Distributed => PlannerMemory::Distributed(None),
                Planner::Centralized => PlannerMemory::Centralized(None),
            },
            last_controls: None,
            failures: 0,
            trace: RunTrace {
                scenario: scenario.config.name.clone(),
                planner,
                robots: scenario.robots,
                epsilon: scenario.config.solver.epsilon,
                records: Vec::with_capacity(steps),
                timings: Vec::with_capacity(steps),
                aborted: None,
            },
        }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn trace(&self) -> &RunTrace {
        &self.trace
    }

    pub fn into_trace(self) -> RunTrace {
        self.trace
    }

    /// True once the duration is covered or the run aborted.
    pub fn finished(&self) -> bool {
        self.trace.aborted.is_some() || self.trace.records.len() >= self.steps
    }

    /// Plans, applies the first inputs and records the step. Returns `None` when finished.
    pub fn step(&mut self) -> Option<&StepRecord> {
        if self.finished() {
            return None;
        }
        let (scenario, options) = (&self.scenario, &self.options);
        let step = self.trace.records.len();
        let world = &self.world;
        let window = scenario.window(world.time, &world.robots);
        let planned = match &mut self.memory {
            PlannerMemory::Distributed(m) => plan_distributed(scenario, &window, world, m, options),
            PlannerMemory::Centralized(m) => plan_centralized(scenario, &window, world, m, options),
        };
        let (plan, failed) = match planned {
            Ok(p) => {
                self.failures = 0;
                (Some(p), false)
            }
            Err(msg) => {
                self.failures += 1;
                if self.failures > MAX_FAILED_SOLVES || self.last_controls.is_none() {
                    self.trace.aborted = Some(format!("step {step}: {msg}"));
                    return None;
                }
                (None, true)
            }
        };
        let controls = match &plan {
            Some(p) => p.controls.clone(),
            None => self.last_controls.clone().expect("checked above"),
        };
        let next = match rollout_step(world, &controls, scenario, options.control_dt) {
            Ok(mut w) if w.is_finite() => {
                w.time = (step + 1) as f64 * options.control_dt;
                w
            }
            Ok(_) => {
                self.trace.aborted = Some(format!("step {step}: non-finite world state"));
                return None;
            }
            Err(e) => {
                self.trace.aborted = Some(SimError::Rollout { time: world.time, source: e }.to_string());
                return None;
            }
        };
        let reference = scenario.payload_reference(next.time);
        let r0 = Vector3::new(next.payload[POS], next.payload[POS + 1], next.payload[POS + 2]);
        let th0 = Vector3::new(next.payload[EULER], next.payload[EULER + 1], next.payload[EULER + 2]);
        self.trace.records.push(StepRecord {
            step,
            time: next.time,
            payload: next.payload.clone(),
            robots: next.robots.clone(),
            controls: controls.clone(),
            reference_position: reference.position,
            reference_euler: reference.euler,
            position_error: (r0 - reference.position).norm(),
            attitude_error: attitude_error(&th0, &reference.euler),
            criterion_history: plan.as_ref().map_or_else(Vec::new, |p| p.criterion_history.clone()),
            criterion: plan.as_ref().map_or(f64::NAN, |p| p.criterion),
            admm_iterations: plan.as_ref().map_or(0, |p| p.admm_iterations),
            tolerance_met: plan.as_ref().is_some_and(|p| p.tolerance_met),
            solve_failed: failed,
            max_stance_friction: max_stance_friction(world, &window, &controls, scenario),
            min_obstacle_barrier: min_obstacle_barrier(&next, scenario),
            momentum_residual: momentum_residual(world, &next, &controls, scenario, options.control_dt),
            warm_two_iteration: plan.as_ref().and_then(|p| p.warm2),
            cold_two_iteration: plan.as_ref().and_then(|p| p.cold2),
        });
        self.trace.timings.push(StepTiming {
            step,
            wall_time: plan.as_ref().map_or(f64::NAN, |p| p.wall_time),
            critical_path_time: plan.as_ref().map_or(f64::NAN, |p| p.critical_path_time),
        });
        self.last_controls = Some(controls);
        self.world = next;
        self.trace.records.last()
    }
}

pub fn run_mpc_loop(scenario: &Scenario, planner: Planner, options: &SimOptions) -> RunTrace {
    let mut sim = Simulation::new(scenario, planner, options);
    while sim.step().is_some() {}
    sim.into_trace()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub steps: usize,
    pub completed: bool,
    pub final_position_error: f64,
    pub final_attitude_error: f64,
    pub position_error: Summary,
    pub attitude_error: Summary,
    pub criterion: Summary,
    /// Share of windows meeting the tolerance, skipping the first `warmup` seconds.
    pub tolerance_rate: f64,
    /// Solve wall times excluding the first solve, s.
    pub wall_time: Summary,
    pub critical_path_time: Summary,
    pub friction_violations: usize,
    pub barrier_violations: usize,
    pub momentum_violations: usize,
    pub failed_solves: usize,
}

/// Friction residual above which a stance force counts as a violation.
pub const FRICTION_TOL: f64 = 1e-6;
/// Momentum bookkeeping tolerance per step.
pub const MOMENTUM_TOL: f64 = 1e-8;

pub fn compute_metrics(trace: &RunTrace, warmup: f64) -> Metrics {
    let col = |f: &dyn Fn(&StepRecord) -> f64| trace.records.iter().map(f).collect::<Vec<_>>();
    let pos = col(&|r| r.position_error);
    let att = col(&|r| r.attitude_error);
    let crit: Vec<f64> = trace.records.iter().filter(|r| !r.solve_failed).map(|r| r.criterion).collect();
    let late: Vec<&StepRecord> = trace
        .records
        .iter()
        .filter(|r| r.time > warmup + 1e-9 && !r.solve_failed)
        .collect();
    let tolerance_rate = if late.is_empty() {
        f64::NAN
    } else {
        late.iter().filter(|r| r.criterion < trace.epsilon).count() as f64 / late.len() as f64
    };
    let times: Vec<f64> = trace.timings.iter().skip(1).map(|t| t.wall_time).filter(|t| t.is_finite()).collect();
    let crit_path: Vec<f64> = trace
        .timings
        .iter()
        .skip(1)
        .map(|t| t.critical_path_time)
        .filter(|t| t.is_finite())
        .collect();
    Metrics {
        steps: trace.records.len(),
        completed: trace.aborted.is_none(),
        final_position_error: pos.last().copied().unwrap_or(f64::NAN),
        final_attitude_error: att.last().copied().unwrap_or(f64::NAN),
        position_error: Summary::of(&pos),
        attitude_error: Summary::of(&att),
        criterion: Summary::of(&crit),
        tolerance_rate,
        wall_time: Summary::of(&times),
        critical_path_time: Summary::of(&crit_path),
        friction_violations: trace.records.iter().filter(|r| r.max_stance_friction > FRICTION_TOL).count(),
        barrier_violations: trace
            .records
            .iter()
            .filter(|r| r.min_obstacle_barrier.is_some_and(|h| h <= 0.0))
            .count(),
        momentum_violations: trace.records.iter().filter(|r| r.momentum_residual > MOMENTUM_TOL).count(),
        failed_solves: trace.records.iter().filter(|r| r.solve_failed).count(),
    }
}
