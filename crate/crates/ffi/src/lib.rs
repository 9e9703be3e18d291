//! C ABI over the scenario loader and the receding-horizon simulator.
//!
//! Handles are opaque and owned by the caller, who releases them with the matching
//! `*_free` function. Every fallible call returns a [`LocoStatus`]; on failure the
//! message is available from [`loco_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use loco_admm::config::{builtin_scenario, parse_config};
use loco_admm::problem::Scenario;
use loco_admm::sim::{compute_metrics, Planner, SimOptions, Simulation};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Finished = 4,
    Aborted = 5,
    Io = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocoPlanner {
    Distributed = 0,
    Centralized = 1,
}

fn planner_from(code: u32) -> Option<Planner> {
    match code {
        c if c == LocoPlanner::Distributed as u32 => Some(Planner::Distributed),
        c if c == LocoPlanner::Centralized as u32 => Some(Planner::Centralized),
        _ => None,
    }
}

/// Validated scenario.
pub struct LocoScenario {
    inner: Scenario,
}

/// Running closed-loop simulation.
pub struct LocoSimulation {
    inner: Simulation,
}

/// Summary of a finished or partial run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LocoMetrics {
    pub steps: usize,
    pub completed: bool,
    pub final_position_error: f64,
    pub final_attitude_error: f64,
    pub median_criterion: f64,
    pub tolerance_rate: f64,
    pub median_wall_time: f64,
    pub median_critical_path_time: f64,
    pub friction_violations: usize,
    pub barrier_violations: usize,
    pub momentum_violations: usize,
    pub failed_solves: usize,
}

/// Outcome of one control step.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LocoStepInfo {
    pub step: usize,
    pub time: f64,
    pub payload_position: [f64; 3],
    pub payload_euler: [f64; 3],
    pub position_error: f64,
    pub criterion: f64,
    pub admm_iterations: usize,
    pub tolerance_met: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(status: LocoStatus, msg: impl Into<String>) -> LocoStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> LocoStatus) -> LocoStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(LocoStatus::Panic, "internal panic"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, LocoStatus> {
    if p.is_null() {
        return Err(fail(LocoStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(LocoStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

fn into_scenario(cfg: Result<loco_admm::config::ScenarioConfig, loco_admm::config::ConfigError>, out: *mut *mut LocoScenario) -> LocoStatus {
    match cfg.and_then(Scenario::new) {
        Ok(inner) => {
            unsafe { *out = Box::into_raw(Box::new(LocoScenario { inner })) };
            LocoStatus::Ok
        }
        Err(e) => fail(LocoStatus::Config, e.to_string()),
    }
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn loco_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn loco_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a built-in scenario for `robots` robots.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn loco_scenario_builtin(name: *const c_char, robots: usize, out: *mut *mut LocoScenario) -> LocoStatus {
    guard(|| {
        if out.is_null() {
            return fail(LocoStatus::NullPointer, "out is null");
        }
        let name = match str_arg(name, "name") {
            Ok(s) => s,
            Err(s) => return s,
        };
        into_scenario(builtin_scenario(name, robots), out)
    })
}

/// Parses a scenario from TOML text.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn loco_scenario_from_toml(text: *const c_char, out: *mut *mut LocoScenario) -> LocoStatus {
    guard(|| {
        if out.is_null() {
            return fail(LocoStatus::NullPointer, "out is null");
        }
        let text = match str_arg(text, "text") {
            Ok(s) => s,
            Err(s) => return s,
        };
        into_scenario(parse_config(text, std::iter::empty::<(String, String)>()), out)
    })
}

/// Number of robots in the scenario.
///
/// # Safety
/// `scenario` must come from a scenario constructor; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn loco_scenario_robots(scenario: *const LocoScenario, out: *mut usize) -> LocoStatus {
    guard(|| match (scenario.as_ref(), out.is_null()) {
        (Some(s), false) => {
            *out = s.inner.robots;
            LocoStatus::Ok
        }
        _ => fail(LocoStatus::NullPointer, "scenario or out is null"),
    })
}

/// # Safety
/// `scenario` must be null or come from a scenario constructor, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn loco_scenario_free(scenario: *mut LocoScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Starts a simulation. `planner` is a [`LocoPlanner`] value; a non-positive
/// `duration` uses the scenario's own.
///
/// # Safety
/// `scenario` must come from a scenario constructor; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn loco_simulation_new(
    scenario: *const LocoScenario,
    planner: u32,
    duration: f64,
    out: *mut *mut LocoSimulation,
) -> LocoStatus {
    guard(|| {
        let Some(sc) = scenario.as_ref() else {
            return fail(LocoStatus::NullPointer, "scenario is null");
        };
        if out.is_null() {
            return fail(LocoStatus::NullPointer, "out is null");
        }
        let Some(planner) = planner_from(planner) else {
            return fail(LocoStatus::InvalidArgument, format!("unknown planner code {planner}"));
        };
        if duration.is_nan() {
            return fail(LocoStatus::InvalidArgument, "duration is NaN");
        }
        let mut options = SimOptions::from_scenario(&sc.inner);
        if duration > 0.0 {
            options.duration = duration;
        }
        let inner = Simulation::new(&sc.inner, planner, &options);
        *out = Box::into_raw(Box::new(LocoSimulation { inner }));
        LocoStatus::Ok
    })
}

/// Advances one control step. Returns `Finished` once the duration is covered and
/// `Aborted` when the run stopped on a failure. `info` may be null.
///
/// # Safety
/// `sim` must come from [`loco_simulation_new`]; `info` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn loco_simulation_step(sim: *mut LocoSimulation, info: *mut LocoStepInfo) -> LocoStatus {
    guard(|| {
        let Some(sim) = sim.as_mut() else {
            return fail(LocoStatus::NullPointer, "sim is null");
        };
        if sim.inner.finished() {
            return finished_status(sim);
        }
        let Some(rec) = sim.inner.step() else {
            return finished_status(sim);
        };
        if let Some(info) = info.as_mut() {
            *info = LocoStepInfo {
                step: rec.step,
                time: rec.time,
                payload_position: [rec.payload[0], rec.payload[1], rec.payload[2]],
                payload_euler: [rec.payload[6], rec.payload[7], rec.payload[8]],
                position_error: rec.position_error,
                criterion: rec.criterion,
                admm_iterations: rec.admm_iterations,
                tolerance_met: rec.tolerance_met,
            };
        }
        LocoStatus::Ok
    })
}

fn finished_status(sim: &LocoSimulation) -> LocoStatus {
    match &sim.inner.trace().aborted {
        Some(msg) => fail(LocoStatus::Aborted, msg.clone()),
        None => LocoStatus::Finished,
    }
}

/// Steps until the run finishes. Returns `Ok` on completion or `Aborted`.
///
/// # Safety
/// `sim` must come from [`loco_simulation_new`].
#[no_mangle]
pub unsafe extern "C" fn loco_simulation_run(sim: *mut LocoSimulation) -> LocoStatus {
    guard(|| {
        let Some(sim) = sim.as_mut() else {
            return fail(LocoStatus::NullPointer, "sim is null");
        };
        while sim.inner.step().is_some() {}
        match finished_status(sim) {
            LocoStatus::Finished => LocoStatus::Ok,
            s => s,
        }
    })
}

/// Copies the current world state: 12 payload values then 24 per robot.
/// `len` is the capacity of `buf`; `written` receives the required length.
///
/// # Safety
/// `sim` must come from [`loco_simulation_new`]; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn loco_simulation_state(sim: *const LocoSimulation, buf: *mut f64, len: usize, written: *mut usize) -> LocoStatus {
    guard(|| {
        let Some(sim) = sim.as_ref() else {
            return fail(LocoStatus::NullPointer, "sim is null");
        };
        let world = sim.inner.world();
        let values: Vec<f64> = world.payload.iter().chain(world.robots.iter().flat_map(|r| r.iter())).copied().collect();
        if let Some(w) = written.as_mut() {
            *w = values.len();
        }
        if buf.is_null() || len < values.len() {
            return fail(LocoStatus::InvalidArgument, format!("buffer needs {} doubles", values.len()));
        }
        ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len());
        LocoStatus::Ok
    })
}

/// Metrics over the steps taken so far. `warmup` seconds are skipped for the tolerance rate.
///
/// # Safety
/// `sim` must come from [`loco_simulation_new`]; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn loco_simulation_metrics(sim: *const LocoSimulation, warmup: f64, out: *mut LocoMetrics) -> LocoStatus {
    guard(|| {
        let (Some(sim), Some(out)) = (sim.as_ref(), out.as_mut()) else {
            return fail(LocoStatus::NullPointer, "sim or out is null");
        };
        let m = compute_metrics(sim.inner.trace(), warmup);
        *out = LocoMetrics {
            steps: m.steps,
            completed: m.completed,
            final_position_error: m.final_position_error,
            final_attitude_error: m.final_attitude_error,
            median_criterion: m.criterion.median,
            tolerance_rate: m.tolerance_rate,
            median_wall_time: m.wall_time.median,
            median_critical_path_time: m.critical_path_time.median,
            friction_violations: m.friction_violations,
            barrier_violations: m.barrier_violations,
            momentum_violations: m.momentum_violations,
            failed_solves: m.failed_solves,
        };
        LocoStatus::Ok
    })
}

/// Writes the deterministic trace as JSON lines, one record per step.
///
/// # Safety
/// `sim` must come from [`loco_simulation_new`]; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn loco_simulation_write_trace(sim: *const LocoSimulation, path: *const c_char) -> LocoStatus {
    guard(|| {
        let Some(sim) = sim.as_ref() else {
            return fail(LocoStatus::NullPointer, "sim is null");
        };
        let path = match str_arg(path, "path") {
            Ok(s) => s,
            Err(s) => return s,
        };
        match loco_admm::cli::write_trace(sim.inner.trace(), Path::new(path)) {
            Ok(()) => LocoStatus::Ok,
            Err(e) => fail(LocoStatus::Io, e.to_string()),
        }
    })
}

/// # Safety
/// `sim` must be null or come from [`loco_simulation_new`], freed at most once.
#[no_mangle]
pub unsafe extern "C" fn loco_simulation_free(sim: *mut LocoSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}
