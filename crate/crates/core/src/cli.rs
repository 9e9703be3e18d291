//! Command-line front end: experiment runs, trial sweeps and timing benchmarks.

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{builtin_scenario, load_config, ConfigError, ScenarioConfig};
use crate::problem::Scenario;
use crate::sim::{compute_metrics, run_mpc_loop, Metrics, Planner, RunTrace, SimOptions};
use crate::stats::Summary;

/// Seconds skipped at the start of a run when scoring the consensus tolerance.
pub const WARMUP: f64 = 0.5;

#[derive(Debug, Parser)]
#[command(name = "loco-admm", version, about = "Distributed consensus-ADMM MPC for cooperative loco-manipulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run closed-loop MPC experiments and write traces.
    Run(RunArgs),
    /// Compare solve times of both planners across team sizes.
    Benchmark(BenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    /// Scenario file (TOML).
    #[arg(long, conflicts_with = "scenario")]
    pub config: Option<PathBuf>,
    /// Built-in scenario name.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub admm_iters: Option<usize>,
    #[arg(long)]
    pub sqp_iters: Option<usize>,
    /// Simulated duration, s.
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, value_parser = parse_planner, default_value = "distributed")]
    pub planner: Planner,
    /// Team size (overrides the file).
    #[arg(long)]
    pub robots: Option<usize>,
    /// Number of trials; more than one perturbs the final waypoint per trial.
    #[arg(long, default_value_t = 1)]
    pub trials: usize,
    /// Run trials on the rayon pool instead of one after another.
    #[arg(long)]
    pub parallel_trials: bool,
    /// Record paired two-iteration warm and cold solves every window.
    #[arg(long)]
    pub compare_cold_start: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Team sizes.
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    pub robots: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_parser = parse_planner, default_value = "distributed,centralized")]
    pub planner: Vec<Planner>,
    /// Timed solves per cell, after the excluded first solve.
    #[arg(long, default_value_t = 100)]
    pub repetitions: usize,
}

fn parse_planner(s: &str) -> Result<Planner, String> {
    s.parse()
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("serialization failed: {0}")]
    Serialize(String),
    #[error("{0} run(s) aborted; see error.txt in the trial directories")]
    Aborted(usize),
    #[error("either --config or --scenario is required")]
    NoScenario,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Resolves the scenario and applies command-line overrides.
pub fn resolve_config(args: &ScenarioArgs, robots: Option<usize>) -> Result<ScenarioConfig, CliError> {
    let mut cfg = match (&args.config, &args.scenario) {
        (Some(path), _) => load_config(path)?,
        (None, Some(name)) => builtin_scenario(name, robots.unwrap_or(2))?,
        (None, None) => return Err(CliError::NoScenario),
    };
    if let Some(r) = robots {
        if r != cfg.robots {
            cfg.robots = r;
            cfg.robot.formation_offsets.clear();
            cfg.payload.handles.clear();
        }
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(m) = args.admm_iters {
        cfg.solver.max_admm_iters = m;
    }
    if let Some(q) = args.sqp_iters {
        cfg.solver.max_sqp_iters = q;
    }
    if let Some(d) = args.duration {
        cfg.sim.duration = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Goal offsets (dx, dy, dyaw) per trial, drawn from one seeded stream.
pub fn trial_perturbations(seed: u64, trials: usize) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|_| {
            [
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
                rng.random_range(-FRAC_PI_2..=FRAC_PI_2),
            ]
        })
        .collect()
}

/// Shifts the final waypoint; a single-waypoint path gains a perturbed goal at the end of the run.
pub fn perturb_goal(cfg: &mut ScenarioConfig, offset: [f64; 3]) {
    if cfg.waypoints.len() == 1 {
        let mut goal = cfg.waypoints[0];
        goal.t = cfg.sim.duration.max(goal.t + 1.0);
        cfg.waypoints.push(goal);
    }
    let goal = cfg.waypoints.last_mut().expect("validated non-empty");
    goal.position[0] += offset[0];
    goal.position[1] += offset[1];
    goal.yaw += offset[2];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub scenario: String,
    pub planner: Planner,
    pub robots: usize,
    pub perturbation: Option<[f64; 3]>,
    pub aborted: Option<String>,
    pub metrics: Metrics,
}

/// One trial: run the loop and write its files into `dir`.
pub fn run_trial(cfg: ScenarioConfig, planner: Planner, compare_cold_start: bool, dir: &Path) -> Result<(RunTrace, Metrics), CliError> {
    let scenario = Scenario::new(cfg)?;
    let mut options = SimOptions::from_scenario(&scenario);
    options.compare_cold_start = compare_cold_start;
    let trace = run_mpc_loop(&scenario, planner, &options);
    let metrics = compute_metrics(&trace, WARMUP);
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_trace(&trace, &dir.join("trace.jsonl"))?;
    write_metrics_csv(&trace, &dir.join("metrics.csv"))?;
    write_timings_csv(&trace, &dir.join("timings.csv"))?;
    if let Some(msg) = &trace.aborted {
        let p = dir.join("error.txt");
        fs::write(&p, format!("{msg}\n")).map_err(io_err(&p))?;
    }
    Ok((trace, metrics))
}

pub fn write_trace(trace: &RunTrace, path: &Path) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in &trace.records {
        let line = serde_json::to_string(r).map_err(|e| CliError::Serialize(e.to_string()))?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv(trace: &RunTrace, path: &Path) -> Result<(), CliError> {
    let mut s = String::from(
        "step,time,position_error,attitude_error,criterion,admm_iterations,tolerance_met,solve_failed,max_stance_friction,min_obstacle_barrier,momentum_residual,warm_two_iteration,cold_two_iteration\n",
    );
    for r in &trace.records {
        s += &format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.time,
            r.position_error,
            r.attitude_error,
            r.criterion,
            r.admm_iterations,
            r.tolerance_met,
            r.solve_failed,
            r.max_stance_friction,
            opt(r.min_obstacle_barrier),
            r.momentum_residual,
            opt(r.warm_two_iteration),
            opt(r.cold_two_iteration),
        );
    }
    fs::write(path, s).map_err(io_err(path))
}

pub fn write_timings_csv(trace: &RunTrace, path: &Path) -> Result<(), CliError> {
    let mut s = String::from("step,wall_time,critical_path_time\n");
    for t in &trace.timings {
        s += &format!("{},{},{}\n", t.step, t.wall_time, t.critical_path_time);
    }
    fs::write(path, s).map_err(io_err(path))
}

fn summary_text(trials: &[TrialSummary]) -> String {
    let mut s = String::new();
    for t in trials {
        let m = &t.metrics;
        s += &format!(
            "trial {:>3} {} {} R={}: {} steps, final error {:.4} m / {:.2} deg, tolerance rate {:.3}, median solve {:.2} ms{}\n",
            t.trial,
            t.scenario,
            t.planner,
            t.robots,
            m.steps,
            m.final_position_error,
            m.final_attitude_error.to_degrees(),
            m.tolerance_rate,
            m.wall_time.median * 1e3,
            t.aborted.as_ref().map(|a| format!(", ABORTED: {a}")).unwrap_or_default(),
        );
    }
    s
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Serialize(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Runs one or more trials and writes traces, metrics and summaries under `--out`.
pub fn run_experiment(args: &RunArgs) -> Result<Vec<TrialSummary>, CliError> {
    let base = resolve_config(&args.scenario, args.robots)?;
    let out = &args.scenario.out;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let perturb = (args.trials > 1).then(|| trial_perturbations(base.seed, args.trials));
    let job = |trial: usize| -> Result<TrialSummary, CliError> {
        let mut cfg = base.clone();
        let offset = perturb.as_ref().map(|p| p[trial]);
        if let Some(o) = offset {
            perturb_goal(&mut cfg, o);
        }
        let dir = if args.trials > 1 { out.join(format!("trial-{trial:03}")) } else { out.clone() };
        let (trace, metrics) = run_trial(cfg, args.planner, args.compare_cold_start, &dir)?;
        Ok(TrialSummary {
            trial,
            scenario: trace.scenario.clone(),
            planner: args.planner,
            robots: trace.robots,
            perturbation: offset,
            aborted: trace.aborted.clone(),
            metrics,
        })
    };
    let results: Vec<Result<TrialSummary, CliError>> = if args.parallel_trials {
        (0..args.trials).into_par_iter().map(job).collect()
    } else {
        (0..args.trials).map(job).collect()
    };
    let trials = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    write_json(&trials, &out.join("summary.json"))?;
    let p = out.join("summary.txt");
    fs::write(&p, summary_text(&trials)).map_err(io_err(&p))?;
    Ok(trials)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub planner: Planner,
    pub robots: usize,
    /// Per-solve wall times with the first solve removed, s.
    pub wall_times: Vec<f64>,
    pub critical_path_times: Vec<f64>,
    pub wall_time: Summary,
    pub critical_path_time: Summary,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub scenario: String,
    pub cells: Vec<BenchCell>,
    /// `(robots, centralized median / distributed median)` using critical-path time.
    pub speedups: Vec<(usize, f64)>,
}

/// Times `repetitions` solves (plus an excluded first solve) per planner and team size.
pub fn run_benchmark(base: &ScenarioConfig, robots: &[usize], planners: &[Planner], repetitions: usize) -> BenchTable {
    let mut cells = Vec::new();
    for &r in robots {
        for &planner in planners {
            let mut cfg = base.clone();
            cfg.robots = r;
            cfg.robot.formation_offsets.clear();
            cfg.payload.handles.clear();
            cfg.sim.duration = cfg.sim.control_dt * (repetitions + 1) as f64;
            let cell = match Scenario::new(cfg) {
                Ok(sc) => {
                    let trace = run_mpc_loop(&sc, planner, &SimOptions::from_scenario(&sc));
                    let wall: Vec<f64> = trace.timings.iter().skip(1).map(|t| t.wall_time).collect();
                    let crit: Vec<f64> = trace.timings.iter().skip(1).map(|t| t.critical_path_time).collect();
                    BenchCell {
                        planner,
                        robots: r,
                        wall_time: Summary::of(&wall),
                        critical_path_time: Summary::of(&crit),
                        wall_times: wall,
                        critical_path_times: crit,
                        error: trace.aborted,
                    }
                }
                Err(e) => BenchCell {
                    planner,
                    robots: r,
                    wall_times: Vec::new(),
                    critical_path_times: Vec::new(),
                    wall_time: Summary::of(&[]),
                    critical_path_time: Summary::of(&[]),
                    error: Some(e.to_string()),
                },
            };
            cells.push(cell);
        }
    }
    let median = |p: Planner, r: usize| {
        cells
            .iter()
            .find(|c| c.planner == p && c.robots == r)
            .map(|c| c.critical_path_time.median)
    };
    let speedups = robots
        .iter()
        .filter_map(|&r| Some((r, median(Planner::Centralized, r)? / median(Planner::Distributed, r)?)))
        .collect();
    BenchTable {
        scenario: base.name.clone(),
        cells,
        speedups,
    }
}

pub fn bench_text(table: &BenchTable) -> String {
    let mut s = format!("benchmark: {}\nplanner       R   median ms   IQR ms    max ms   crit-path median ms\n", table.scenario);
    for c in &table.cells {
        s += &format!(
            "{:<12} {:>2} {:>11.3} {:>8.3} {:>9.3} {:>12.3}{}\n",
            c.planner.to_string(),
            c.robots,
            c.wall_time.median * 1e3,
            c.wall_time.iqr * 1e3,
            c.wall_time.max * 1e3,
            c.critical_path_time.median * 1e3,
            c.error.as_ref().map(|e| format!("  FAILED: {e}")).unwrap_or_default(),
        );
    }
    for (r, x) in &table.speedups {
        s += &format!("speedup R={r}: {x:.2}x\n");
    }
    s
}

fn benchmark(args: &BenchArgs) -> Result<(), CliError> {
    let base = resolve_config(&args.scenario, args.robots.first().copied())?;
    let table = run_benchmark(&base, &args.robots, &args.planner, args.repetitions.max(1));
    let out = &args.scenario.out;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_json(&table, &out.join("benchmark.json"))?;
    let text = bench_text(&table);
    let p = out.join("benchmark.txt");
    fs::write(&p, &text).map_err(io_err(&p))?;
    print!("{text}");
    Ok(())
}

/// Entry point; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Run(args) => run_experiment(args).and_then(|trials| {
            print!("{}", summary_text(&trials));
            match trials.iter().filter(|t| t.aborted.is_some()).count() {
                0 => Ok(()),
                n => Err(CliError::Aborted(n)),
            }
        }),
        Command::Benchmark(args) => benchmark(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Aborted(_) => 2,
                _ => 1,
            }
        }
    }
}
