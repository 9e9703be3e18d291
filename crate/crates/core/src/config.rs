//! Scenario configuration: TOML schema, defaults, validation, environment overrides and
//! the built-in scenario library.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{ConvexRegion, Obstacle, Terrain, TerrainSegment, WrenchBox};
use crate::cost::{CostWeights, PenaltySettings};
use crate::gait::{build_gait_schedule, GaitPattern, Waypoint};
use crate::model::BodyParams;

/// Prefix of environment variables overriding config keys, e.g. `LOCO_ADMM__solver__rho=20`.
pub const ENV_PREFIX: &str = "LOCO_ADMM__";

pub const SCENARIO_NAMES: [&str; 7] = [
    "flat-translate",
    "flat-turn-90",
    "gap",
    "slope-10deg",
    "gap-slope",
    "obstacle-field",
    "static-hold",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Validation {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PayloadConfig {
    pub mass: f64,
    pub inertia: Matrix3<f64>,
    /// Grasp points in the payload frame; empty places them on a circle of `handle_radius`.
    pub handles: Vec<Vector3<f64>>,
    pub handle_radius: f64,
    /// Footprint radius used by obstacle barriers.
    pub footprint_radius: f64,
}

impl Default for PayloadConfig {
    fn default() -> Self {
        Self {
            mass: 10.0,
            inertia: Matrix3::from_diagonal(&Vector3::new(0.208, 0.908, 0.967)),
            handles: Vec::new(),
            handle_radius: 0.5,
            footprint_radius: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobotConfig {
    pub mass: f64,
    pub inertia: Matrix3<f64>,
    /// Nominal foot points in the base frame; their count sets the number of feet.
    pub foot_nominal: Vec<Vector3<f64>>,
    /// Base offsets in the payload frame; empty places them on a circle of `formation_radius`.
    pub formation_offsets: Vec<Vector3<f64>>,
    pub formation_radius: f64,
    pub formation_height: f64,
    pub body_radius: f64,
}

impl Default for RobotConfig {
    fn default() -> Self {
        Self {
            mass: 50.0,
            inertia: Matrix3::from_diagonal(&Vector3::new(0.6, 1.8, 2.0)),
            foot_nominal: vec![
                Vector3::new(0.3, 0.2, -0.4),
                Vector3::new(0.3, -0.2, -0.4),
                Vector3::new(-0.3, 0.2, -0.4),
                Vector3::new(-0.3, -0.2, -0.4),
            ],
            formation_offsets: Vec::new(),
            formation_radius: 0.9,
            formation_height: -0.1,
            body_radius: 0.4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaitConfig {
    pub pattern: GaitPattern,
    pub phase_duration: f64,
    pub duty_factor: f64,
}

impl Default for GaitConfig {
    fn default() -> Self {
        Self {
            pattern: GaitPattern::Trot,
            phase_duration: 0.35,
            duty_factor: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintConfig {
    pub torque_box: WrenchBox,
    pub hand_mu: f64,
    pub foot_box: Vector3<f64>,
    pub arm_box: Vector3<f64>,
    pub formation_bound: Vector3<f64>,
    pub clearance: f64,
    pub cbf_gamma: f64,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            torque_box: WrenchBox::default(),
            hand_mu: 0.8,
            foot_box: Vector3::new(0.2, 0.15, 0.12),
            arm_box: Vector3::new(0.2, 0.2, 0.2),
            formation_bound: Vector3::new(0.3, 0.3, 0.2),
            clearance: 0.3,
            cbf_gamma: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub rho: f64,
    pub epsilon: f64,
    pub max_admm_iters: usize,
    pub max_sqp_iters: usize,
    /// SQP iterations of the first window, which starts from the rolled-out guess.
    pub initial_sqp_iters: usize,
    /// Planning horizon, s.
    pub horizon: f64,
    /// Planning step, s.
    pub dt: f64,
    pub penalty: PenaltySettings,
    /// Solve robot sub-blocks concurrently.
    pub parallel: bool,
    /// Close SQP defects with a feedback rollout before a plan is used.
    pub feasibility_projection: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rho: 10.0,
            epsilon: 5e-3,
            max_admm_iters: 2,
            max_sqp_iters: 1,
            initial_sqp_iters: 40,
            horizon: 1.0,
            dt: 0.05,
            penalty: PenaltySettings::default(),
            parallel: true,
            feasibility_projection: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub duration: f64,
    pub control_dt: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            duration: 10.0,
            control_dt: 0.05,
        }
    }
}

fn default_name() -> String {
    "custom".into()
}

fn default_gravity() -> Vector3<f64> {
    crate::model::default_gravity()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Team size.
    pub robots: usize,
    pub waypoints: Vec<Waypoint>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_gravity")]
    pub gravity: Vector3<f64>,
    #[serde(default)]
    pub payload: PayloadConfig,
    #[serde(default)]
    pub robot: RobotConfig,
    #[serde(default)]
    pub gait: GaitConfig,
    #[serde(default)]
    pub terrain: Terrain,
    #[serde(default)]
    pub regions: Vec<ConvexRegion>,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    #[serde(default)]
    pub weights: CostWeights,
    #[serde(default)]
    pub constraints: ConstraintConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub sim: SimConfig,
}

fn ring(radius: f64, z: f64, count: usize) -> Vec<Vector3<f64>> {
    (0..count)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / count as f64 + PI;
            Vector3::new(radius * a.cos(), radius * a.sin(), z)
        })
        .collect()
}

impl ScenarioConfig {
    pub fn n_feet(&self) -> usize {
        self.robot.foot_nominal.len()
    }

    pub fn handle_offsets(&self) -> Vec<Vector3<f64>> {
        if self.payload.handles.is_empty() {
            ring(self.payload.handle_radius, 0.0, self.robots)
        } else {
            self.payload.handles.clone()
        }
    }

    pub fn formation_offsets(&self) -> Vec<Vector3<f64>> {
        if self.robot.formation_offsets.is_empty() {
            ring(self.robot.formation_radius, self.robot.formation_height, self.robots)
        } else {
            self.robot.formation_offsets.clone()
        }
    }

    pub fn payload_params(&self) -> BodyParams {
        BodyParams {
            mass: self.payload.mass,
            inertia_body: self.payload.inertia,
            gravity: self.gravity,
            handle_offsets: self.handle_offsets(),
        }
    }

    pub fn robot_params(&self) -> BodyParams {
        BodyParams {
            mass: self.robot.mass,
            inertia_body: self.robot.inertia,
            gravity: self.gravity,
            handle_offsets: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=8).contains(&self.robots) {
            return Err(invalid("robots", format!("team size must lie in [1, 8], got {}", self.robots)));
        }
        self.payload_params().validate().map_err(|m| invalid("payload", m))?;
        self.robot_params().validate().map_err(|m| invalid("robot", m))?;
        if !self.payload.handles.is_empty() && self.payload.handles.len() != self.robots {
            return Err(invalid("payload.handles", "need exactly one handle per robot"));
        }
        if !self.robot.formation_offsets.is_empty() && self.robot.formation_offsets.len() != self.robots {
            return Err(invalid("robot.formation_offsets", "need exactly one offset per robot"));
        }
        if self.robot.foot_nominal.is_empty() {
            return Err(invalid("robot.foot_nominal", "at least one foot is required"));
        }
        if !(self.payload.footprint_radius >= 0.0 && self.robot.body_radius >= 0.0) {
            return Err(invalid("payload.footprint_radius", "radii must be non-negative"));
        }
        if self.waypoints.is_empty() {
            return Err(invalid("waypoints", "at least one waypoint is required"));
        }
        if self.waypoints.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(invalid("waypoints", "times must be strictly increasing"));
        }
        let s = &self.solver;
        build_gait_schedule(
            self.gait.pattern,
            0.0,
            s.horizon,
            s.dt,
            self.gait.phase_duration,
            self.gait.duty_factor,
            self.n_feet(),
        )
        .map_err(|e| invalid("gait", e.to_string()))?;
        self.terrain.validate().map_err(|m| invalid("terrain", m))?;
        let edges = self.terrain.step_edges();
        for (q, region) in self.regions.iter().enumerate() {
            region.validate().map_err(|m| invalid(format!("regions[{q}]"), m))?;
            let (lo, hi) = region.x_range();
            if edges.iter().any(|e| *e > lo && *e < hi) {
                return Err(invalid(format!("regions[{q}]"), "region straddles a terrain step edge"));
            }
        }
        for (q, o) in self.obstacles.iter().enumerate() {
            if !(o.radius > 0.0) {
                return Err(invalid(format!("obstacles[{q}].radius"), "radius must be positive"));
            }
        }
        self.weights.validate().map_err(|m| invalid("weights", m))?;
        let c = &self.constraints;
        c.torque_box.validate().map_err(|m| invalid("constraints.torque_box", m))?;
        if !(c.hand_mu > 0.0) {
            return Err(invalid("constraints.hand_mu", "must be positive"));
        }
        for (name, v) in [("foot_box", c.foot_box), ("arm_box", c.arm_box), ("formation_bound", c.formation_bound)] {
            if v.iter().any(|x| !(*x > 0.0)) {
                return Err(invalid(format!("constraints.{name}"), "half widths must be positive"));
            }
        }
        if !(c.cbf_gamma > 0.0 && c.cbf_gamma <= 1.0) {
            return Err(invalid("constraints.cbf_gamma", "must lie in (0, 1]"));
        }
        if !(s.rho > 0.0) {
            return Err(invalid("solver.rho", "must be positive"));
        }
        if !(s.epsilon > 0.0) {
            return Err(invalid("solver.epsilon", "must be positive"));
        }
        let p = &s.penalty;
        if !(p.barrier_mu > 0.0 && p.barrier_delta > 0.0 && p.equality_weight > 0.0) {
            return Err(invalid("solver.penalty", "barrier and penalty parameters must be positive"));
        }
        if !(self.sim.duration > 0.0) {
            return Err(invalid("sim.duration", "must be positive"));
        }
        if !(self.sim.control_dt > 0.0) {
            return Err(invalid("sim.control_dt", "must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Parse(e.to_string()))
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `LOCO_ADMM__a__b=value` style overrides to a parsed table.
pub fn apply_overrides<I>(table: &mut toml::Table, vars: I) -> Result<(), ConfigError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut vars: Vec<_> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<&str> = key[ENV_PREFIX.len()..].split("__").collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(ConfigError::Parse(format!("malformed override `{key}`")));
        }
        let mut node = &mut *table;
        for part in &path[..path.len() - 1] {
            let entry = node
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| ConfigError::Parse(format!("override `{key}` descends into a non-table")))?;
        }
        node.insert(path[path.len() - 1].to_string(), parse_env_value(&raw));
    }
    Ok(())
}

/// Parses and validates a config from TOML text plus overrides.
pub fn parse_config<I>(text: &str, overrides: I) -> Result<ScenarioConfig, ConfigError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    apply_overrides(&mut table, overrides)?;
    let cfg: ScenarioConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads, parses and validates a scenario file, honouring environment overrides.
pub fn load_config(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config(&text, std::env::vars())
}

fn waypoint(t: f64, x: f64, y: f64, yaw: f64) -> Waypoint {
    Waypoint {
        t,
        position: [x, y, 0.5],
        yaw,
    }
}

/// Built-in scenario for a team of `robots`.
pub fn builtin_scenario(name: &str, robots: usize) -> Result<ScenarioConfig, ConfigError> {
    let mut cfg = ScenarioConfig {
        name: name.to_string(),
        robots,
        waypoints: Vec::new(),
        seed: 0,
        gravity: default_gravity(),
        payload: PayloadConfig::default(),
        robot: RobotConfig::default(),
        gait: GaitConfig::default(),
        terrain: Terrain::default(),
        regions: Vec::new(),
        obstacles: Vec::new(),
        weights: CostWeights::default(),
        constraints: ConstraintConfig::default(),
        solver: SolverConfig::default(),
        sim: SimConfig::default(),
    };
    let gap_regions = |gap_start: f64, gap_end: f64| {
        vec![
            ConvexRegion::rectangle(-20.0, gap_start, -10.0, 10.0),
            ConvexRegion::rectangle(gap_end, 30.0, -10.0, 10.0),
        ]
    };
    match name {
        "flat-translate" => {
            cfg.waypoints = vec![waypoint(0.0, 0.0, 0.0, 0.0), waypoint(10.0, 1.5, 0.0, 0.0)];
        }
        "flat-turn-90" => {
            cfg.waypoints = vec![
                waypoint(0.0, 0.0, 0.0, 0.0),
                waypoint(16.0, 3.25, 0.0, 0.0),
                waypoint(18.0, 3.25, 0.0, PI / 2.0),
                waypoint(34.0, 3.25, 3.25, PI / 2.0),
            ];
            cfg.sim.duration = 34.0;
        }
        "gap" => {
            cfg.waypoints = vec![waypoint(0.0, 0.0, 0.0, 0.0), waypoint(8.0, 2.0, 0.0, 0.0)];
            cfg.regions = gap_regions(1.0, 1.2);
            cfg.sim.duration = 8.0;
        }
        "slope-10deg" => {
            cfg.waypoints = vec![waypoint(0.0, 0.0, 0.0, 0.0), waypoint(10.0, 2.0, 0.0, 0.0)];
            cfg.terrain = Terrain::slope(0.7, 1.5, 10.0);
        }
        "gap-slope" => {
            cfg.waypoints = vec![waypoint(0.0, 0.0, 0.0, 0.0), waypoint(12.0, 3.0, 0.0, 0.0)];
            cfg.terrain = Terrain {
                mu: 0.7,
                segments: vec![
                    TerrainSegment {
                        x_start: f64::NEG_INFINITY,
                        height: 0.0,
                        slope_deg: 0.0,
                    },
                    TerrainSegment {
                        x_start: 2.5,
                        height: 0.0,
                        slope_deg: 10.0,
                    },
                ],
            };
            cfg.regions = gap_regions(1.0, 1.2);
            cfg.sim.duration = 12.0;
        }
        "obstacle-field" => {
            cfg.waypoints = vec![waypoint(0.0, 0.0, 0.0, 0.0), waypoint(10.0, 1.5, 0.0, 0.0)];
            // Teams larger than two also occupy the lateral axis of the formation circle.
            let side = if robots > 2 { cfg.robot.formation_radius } else { 0.0 };
            cfg.obstacles = vec![
                Obstacle {
                    center: [0.8, 1.05 + side],
                    radius: 0.25,
                },
                Obstacle {
                    center: [1.6, -1.05 - side],
                    radius: 0.25,
                },
                Obstacle {
                    center: [2.6, 0.95 + side],
                    radius: 0.2,
                },
            ];
        }
        "static-hold" => {
            cfg.waypoints = vec![waypoint(0.0, 0.0, 0.0, 0.0)];
            cfg.gait.pattern = GaitPattern::Stance;
            cfg.sim.duration = 5.0;
        }
        other => return Err(ConfigError::UnknownScenario(other.to_string())),
    }
    cfg.validate()?;
    Ok(cfg)
}
