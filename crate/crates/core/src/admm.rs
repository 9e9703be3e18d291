//! Consensus ADMM coordinator in Gauss-Seidel order: payload sub-block, then all robot
//! sub-blocks concurrently against the fresh payload solution, then the scaled dual update.

use std::time::Instant;

use nalgebra::{DVector, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sqp::{solve_subproblem, OcpDefinition, SolveReport, SqpError, SqpSettings, Trajectory};

/// Source of the sub-block problems of one window.
pub trait DistributedProblem: Sync {
    fn robots(&self) -> usize;
    fn dt(&self) -> f64;
    /// Index of `f_h` inside a robot control; `tau_h` follows it.
    fn hand_offset(&self) -> usize;
    /// Payload problem with the robots' trajectories held fixed.
    fn payload_ocp(&self, robots: &[Trajectory], duals: &[Vec<Vector6<f64>>], rho: f64) -> OcpDefinition;
    /// Robot `i` problem with the payload trajectory held fixed.
    fn robot_ocp(&self, i: usize, payload: &Trajectory, duals: &[Vector6<f64>], rho: f64) -> OcpDefinition;
}

/// Payload trajectory (states and wrench copies) and one trajectory per robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubTrajectories {
    pub payload: Trajectory,
    pub robots: Vec<Trajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmState {
    pub trajectories: SubTrajectories,
    /// Scaled duals `w_i[k]`.
    pub duals: Vec<Vec<Vector6<f64>>>,
    pub rho: f64,
    pub iteration: usize,
    pub history: Vec<f64>,
}

impl AdmmState {
    /// Zero duals around a primal guess.
    pub fn new(trajectories: SubTrajectories, rho: f64) -> Self {
        let n = trajectories.payload.horizon();
        let r = trajectories.robots.len();
        Self {
            trajectories,
            duals: vec![vec![Vector6::zeros(); n]; r],
            rho,
            iteration: 0,
            history: Vec::new(),
        }
    }
}

/// Stacked Newton-pair violations and the stopping criterion `dt * sum_k |s[k]|`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusResidual {
    pub per_step: Vec<DVector<f64>>,
    pub criterion: f64,
}

pub fn consensus_residual(traj: &SubTrajectories, hand_offset: usize, dt: f64) -> ConsensusResidual {
    let n = traj.payload.horizon();
    let r = traj.robots.len();
    let per_step: Vec<DVector<f64>> = (0..n)
        .map(|k| {
            DVector::from_fn(6 * r, |row, _| {
                let (i, a) = (row / 6, row % 6);
                traj.robots[i].controls[k][hand_offset + a] + traj.payload.controls[k][6 * i + a]
            })
        })
        .collect();
    let criterion = dt * per_step.iter().map(|s| s.norm()).sum::<f64>();
    ConsensusResidual { per_step, criterion }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmSettings {
    pub max_iters: usize,
    pub epsilon: f64,
    pub parallel: bool,
    pub sqp: SqpSettings,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        Self {
            max_iters: 2,
            epsilon: 5e-3,
            parallel: true,
            sqp: SqpSettings::default(),
        }
    }
}

#[derive(Debug, Error)]
#[error("{subproblem} sub-block failed in ADMM iteration {iteration}: {source}")]
pub struct AdmmError {
    pub iteration: usize,
    pub subproblem: String,
    #[source]
    pub source: SqpError,
}

/// Telemetry of one ADMM iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub criterion: f64,
    /// Iteration counter of the payload solution each robot consumed.
    pub payload_source: Vec<usize>,
    pub payload_merit: f64,
    pub robot_merits: Vec<f64>,
    pub payload_time: f64,
    pub robot_times: Vec<f64>,
}

/// Result of one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub initial_criterion: f64,
    pub iterations: Vec<IterationReport>,
    pub criterion: f64,
    pub tolerance_met: bool,
    /// Coordinator wall time, s.
    pub wall_time: f64,
    /// Sum over iterations of payload time plus the slowest robot time, s.
    pub critical_path_time: f64,
}

/// Failed window: the last consistent state and the error.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct WindowFailure {
    pub state: Box<AdmmState>,
    pub report: WindowReport,
    #[source]
    pub error: AdmmError,
}

/// One Gauss-Seidel sweep. `state` is only modified when every sub-block succeeds.
pub fn admm_iteration<P: DistributedProblem + ?Sized>(
    state: &mut AdmmState,
    problem: &P,
    settings: &AdmmSettings,
) -> Result<IterationReport, AdmmError> {
    let fail = |subproblem: String, source| AdmmError {
        iteration: state.iteration,
        subproblem,
        source,
    };
    let payload_ocp = problem.payload_ocp(&state.trajectories.robots, &state.duals, state.rho);
    let payload = solve_subproblem(&payload_ocp, &state.trajectories.payload, &settings.sqp)
        .map_err(|e| fail("payload".into(), e))?;
    let fresh = &payload.trajectory;
    let version = state.iteration + 1;

    let solve_robot = |i: usize| -> Result<SolveReport, AdmmError> {
        let ocp = problem.robot_ocp(i, fresh, &state.duals[i], state.rho);
        solve_subproblem(&ocp, &state.trajectories.robots[i], &settings.sqp).map_err(|e| fail(format!("robot {i}"), e))
    };
    let robots: Vec<SolveReport> = if settings.parallel {
        (0..problem.robots())
            .into_par_iter()
            .map(solve_robot)
            .collect::<Result<_, _>>()?
    } else {
        (0..problem.robots()).map(solve_robot).collect::<Result<_, _>>()?
    };

    let next = SubTrajectories {
        payload: payload.trajectory.clone(),
        robots: robots.iter().map(|r| r.trajectory.clone()).collect(),
    };
    let res = consensus_residual(&next, problem.hand_offset(), problem.dt());
    for (i, w) in state.duals.iter_mut().enumerate() {
        for (k, wk) in w.iter_mut().enumerate() {
            *wk += Vector6::from_fn(|a, _| res.per_step[k][6 * i + a]);
        }
    }
    state.trajectories = next;
    state.iteration = version;
    state.history.push(res.criterion);
    Ok(IterationReport {
        iteration: version,
        criterion: res.criterion,
        payload_source: vec![version; problem.robots()],
        payload_merit: payload.merit,
        robot_merits: robots.iter().map(|r| r.merit).collect(),
        payload_time: payload.wall_time,
        robot_times: robots.iter().map(|r| r.wall_time).collect(),
    })
}

/// Iterates until the criterion drops below `epsilon` or the budget is spent.
///
/// At least one iteration runs whenever `max_iters >= 1`, since the window's initial
/// state differs from the one the guess was computed for.
pub fn solve_window<P: DistributedProblem + ?Sized>(
    problem: &P,
    init: AdmmState,
    settings: &AdmmSettings,
) -> Result<(AdmmState, WindowReport), WindowFailure> {
    let start = Instant::now();
    let mut state = init;
    let initial_criterion = consensus_residual(&state.trajectories, problem.hand_offset(), problem.dt()).criterion;
    let mut report = WindowReport {
        initial_criterion,
        iterations: Vec::new(),
        criterion: initial_criterion,
        tolerance_met: initial_criterion < settings.epsilon,
        wall_time: 0.0,
        critical_path_time: 0.0,
    };
    for _ in 0..settings.max_iters {
        match admm_iteration(&mut state, problem, settings) {
            Ok(it) => {
                report.critical_path_time += it.payload_time + it.robot_times.iter().copied().fold(0.0, f64::max);
                report.criterion = it.criterion;
                report.iterations.push(it);
                report.tolerance_met = report.criterion < settings.epsilon;
                if report.tolerance_met {
                    break;
                }
            }
            Err(error) => {
                report.wall_time = start.elapsed().as_secs_f64();
                return Err(WindowFailure {
                    state: Box::new(state),
                    report,
                    error,
                });
            }
        }
    }
    report.wall_time = start.elapsed().as_secs_f64();
    Ok((state, report))
}

fn shift_series<T, F>(old: &[T], len: usize, offset: f64, lerp: F) -> Vec<T>
where
    T: Clone,
    F: Fn(&T, &T, f64) -> T,
{
    let last = old.len() - 1;
    (0..len)
        .map(|k| {
            let s = k as f64 + offset;
            let i = s.floor() as usize;
            if i >= last {
                old[last].clone()
            } else {
                let frac = s - i as f64;
                if frac == 0.0 {
                    old[i].clone()
                } else {
                    lerp(&old[i], &old[i + 1], frac)
                }
            }
        })
        .collect()
}

fn shift_trajectory(t: &Trajectory, offset: f64) -> Trajectory {
    let lerp = |a: &DVector<f64>, b: &DVector<f64>, s: f64| a + (b - a) * s;
    Trajectory {
        states: shift_series(&t.states, t.states.len(), offset, lerp),
        controls: shift_series(&t.controls, t.controls.len(), offset, lerp),
    }
}

/// Shifts primal and dual sequences by `shift` seconds on a grid of spacing `dt`,
/// interpolating linearly and holding the last entry past the old horizon.
pub fn warm_start_shift(prev: &AdmmState, shift: f64, dt: f64) -> AdmmState {
    assert!(shift >= 0.0, "shift must be non-negative");
    let offset = shift / dt;
    let lerp = |a: &Vector6<f64>, b: &Vector6<f64>, s: f64| a + (b - a) * s;
    AdmmState {
        trajectories: SubTrajectories {
            payload: shift_trajectory(&prev.trajectories.payload, offset),
            robots: prev.trajectories.robots.iter().map(|t| shift_trajectory(t, offset)).collect(),
        },
        duals: prev.duals.iter().map(|w| shift_series(w, w.len(), offset, lerp)).collect(),
        rho: prev.rho,
        iteration: 0,
        history: Vec::new(),
    }
}

/// Single-trajectory variant used by the centralized planner.
pub fn shift_single(prev: &Trajectory, shift: f64, dt: f64) -> Trajectory {
    shift_trajectory(prev, shift / dt)
}
