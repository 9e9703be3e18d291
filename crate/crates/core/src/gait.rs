//! Contact schedules and start-to-goal reference trajectories.

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::Terrain;
use crate::model::rotation::wrap_angle;
use crate::model::{foot_offset, RobotState, EULER, POS, RIGID_BODY_DIM, VEL};

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GaitError {
    #[error("invalid gait configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GaitPattern {
    Stance,
    Trot,
}

/// Contact flags on a time grid: `contact[k][j]` for knot `k` and foot `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitSchedule {
    pub pattern: GaitPattern,
    pub phase_duration: f64,
    pub duty_factor: f64,
    pub t_start: f64,
    pub dt: f64,
    pub contact: Vec<Vec<bool>>,
}

impl GaitSchedule {
    pub fn horizon_steps(&self) -> usize {
        self.contact.len() - 1
    }

    pub fn n_feet(&self) -> usize {
        self.contact.first().map_or(0, Vec::len)
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t_start + k as f64 * self.dt
    }

    /// Flags of foot `j` over the grid.
    pub fn foot(&self, j: usize) -> Vec<bool> {
        self.contact.iter().map(|row| row[j]).collect()
    }

    pub fn period(&self) -> f64 {
        self.phase_duration / self.duty_factor
    }
}

/// Stance flag of `foot` at absolute time `t`.
pub fn in_stance(pattern: GaitPattern, t: f64, foot: usize, phase_duration: f64, duty_factor: f64) -> bool {
    match pattern {
        GaitPattern::Stance => true,
        GaitPattern::Trot => {
            let period = phase_duration / duty_factor;
            // Diagonal pairs {0, 3} and {1, 2} for the usual FL, FR, HL, HR ordering.
            let group = (foot % 2) ^ ((foot / 2) % 2);
            let shifted = t - 0.5 * period * group as f64 + period;
            let s = (shifted - period * (shifted / period + TIME_EPS).floor()).max(0.0);
            s + TIME_EPS < phase_duration
        }
    }
}

/// Contact table for knots `t_start + k dt`, `k = 0..=horizon/dt`.
pub fn build_gait_schedule(
    pattern: GaitPattern,
    t_start: f64,
    horizon: f64,
    dt: f64,
    phase_duration: f64,
    duty_factor: f64,
    n_feet: usize,
) -> Result<GaitSchedule, GaitError> {
    if !(dt > 0.0 && horizon > 0.0) {
        return Err(GaitError::Config("horizon and dt must be positive".into()));
    }
    let steps = (horizon / dt).round();
    if (steps * dt - horizon).abs() > TIME_EPS {
        return Err(GaitError::Config(format!("dt {dt} does not divide horizon {horizon}")));
    }
    if !(duty_factor > 0.0 && duty_factor <= 1.0) {
        return Err(GaitError::Config(format!("duty factor must lie in (0, 1], got {duty_factor}")));
    }
    if !(phase_duration > 0.0 && phase_duration.is_finite()) {
        return Err(GaitError::Config(format!("phase duration must be positive, got {phase_duration}")));
    }
    if n_feet == 0 {
        return Err(GaitError::Config("at least one foot is required".into()));
    }
    let contact = (0..=steps as usize)
        .map(|k| {
            let t = t_start + k as f64 * dt;
            (0..n_feet)
                .map(|j| in_stance(pattern, t, j, phase_duration, duty_factor))
                .collect()
        })
        .collect();
    Ok(GaitSchedule {
        pattern,
        phase_duration,
        duty_factor,
        t_start,
        dt,
        contact,
    })
}

/// Timed payload pose target; `position` z is measured above the terrain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub t: f64,
    pub position: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
}

/// Piecewise-linear payload path with cumulatively unwrapped yaw.
#[derive(Debug, Clone)]
pub struct PayloadPath {
    times: Vec<f64>,
    points: Vec<Vector3<f64>>,
    yaws: Vec<f64>,
}

/// Sample of the payload path: planar pose and its rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSample {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub yaw: f64,
    pub yaw_rate: f64,
}

impl PayloadPath {
    pub fn new(waypoints: &[Waypoint]) -> Result<Self, GaitError> {
        if waypoints.is_empty() {
            return Err(GaitError::Config("waypoint list is empty".into()));
        }
        if waypoints.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return Err(GaitError::Config("waypoint times must be strictly increasing".into()));
        }
        let mut yaws = vec![waypoints[0].yaw];
        for w in &waypoints[1..] {
            let prev = *yaws.last().unwrap();
            yaws.push(prev + wrap_angle(w.yaw - prev));
        }
        Ok(Self {
            times: waypoints.iter().map(|w| w.t).collect(),
            points: waypoints.iter().map(|w| Vector3::from(w.position)).collect(),
            yaws,
        })
    }

    pub fn sample(&self, t: f64) -> PathSample {
        let last = self.times.len() - 1;
        if t <= self.times[0] || last == 0 {
            let i = if t <= self.times[0] { 0 } else { last };
            return PathSample {
                position: self.points[i],
                velocity: Vector3::zeros(),
                yaw: self.yaws[i],
                yaw_rate: 0.0,
            };
        }
        if t >= self.times[last] {
            return PathSample {
                position: self.points[last],
                velocity: Vector3::zeros(),
                yaw: self.yaws[last],
                yaw_rate: 0.0,
            };
        }
        let i = self.times.windows(2).position(|w| t < w[1]).unwrap();
        let span = self.times[i + 1] - self.times[i];
        let s = (t - self.times[i]) / span;
        let dp = self.points[i + 1] - self.points[i];
        let dy = self.yaws[i + 1] - self.yaws[i];
        PathSample {
            position: self.points[i] + dp * s,
            velocity: dp / span,
            yaw: self.yaws[i] + dy * s,
            yaw_rate: dy / span,
        }
    }
}

/// Geometry the references are composed from.
#[derive(Debug, Clone)]
pub struct ReferenceGeometry<'a> {
    pub terrain: &'a Terrain,
    /// Robot base offsets in the payload frame.
    pub formation_offsets: &'a [Vector3<f64>],
    /// Nominal foot points relative to a robot base, in the base frame.
    pub foot_nominal: &'a [Vector3<f64>],
}

/// Per-subsystem state references on the knots of a schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub payload: Vec<DVector<f64>>,
    pub robots: Vec<Vec<DVector<f64>>>,
}

impl ReferenceTrajectory {
    /// Stacked `[x0; x1; ...]` reference at knot `k`.
    pub fn stacked(&self, k: usize) -> DVector<f64> {
        let mut parts: Vec<f64> = self.payload[k].iter().copied().collect();
        for r in &self.robots {
            parts.extend(r[k].iter());
        }
        DVector::from_vec(parts)
    }
}

fn rot_z(yaw: f64, v: &Vector3<f64>) -> Vector3<f64> {
    let (s, c) = yaw.sin_cos();
    Vector3::new(c * v[0] - s * v[1], s * v[0] + c * v[1], v[2])
}

/// Payload and robot references for every knot of `gait`.
///
/// The payload follows the interpolated path at `waypoint z` above the terrain. Robot
/// bases are rigid compositions of the payload pose with their formation offsets,
/// shifted vertically by the terrain height difference under them. Feet sit at their
/// nominal points projected onto the terrain. Pitch, roll and angular momentum are zero.
pub fn generate_references(path: &PayloadPath, geometry: &ReferenceGeometry<'_>, gait: &GaitSchedule) -> ReferenceTrajectory {
    let n = gait.horizon_steps();
    let terrain = geometry.terrain;
    let mut payload = Vec::with_capacity(n + 1);
    let mut robots = vec![Vec::with_capacity(n + 1); geometry.formation_offsets.len()];
    for k in 0..=n {
        let s = path.sample(gait.time(k));
        let h0 = terrain.height(s.position[0], s.position[1]);
        let r0 = Vector3::new(s.position[0], s.position[1], s.position[2] + h0);
        let climb0 = terrain.gradient(r0[0], r0[1]).dot(&s.velocity.xy());
        let v0 = s.velocity + Vector3::new(0.0, 0.0, climb0);
        let mut x0 = DVector::zeros(RIGID_BODY_DIM);
        x0.fixed_rows_mut::<3>(POS).copy_from(&r0);
        x0.fixed_rows_mut::<3>(VEL).copy_from(&v0);
        x0[EULER] = s.yaw;
        payload.push(x0);

        for (i, off) in geometry.formation_offsets.iter().enumerate() {
            let rel = rot_z(s.yaw, off);
            let mut base = r0 + rel;
            base[2] += terrain.height(base[0], base[1]) - h0;
            let mut vel = s.velocity + Vector3::new(0.0, 0.0, s.yaw_rate).cross(&rel);
            vel[2] += terrain.gradient(base[0], base[1]).dot(&vel.xy());
            let mut xi = DVector::zeros(RobotState::dim(geometry.foot_nominal.len()));
            xi.fixed_rows_mut::<3>(POS).copy_from(&base);
            xi.fixed_rows_mut::<3>(VEL).copy_from(&vel);
            xi[EULER] = s.yaw;
            for (j, p) in geometry.foot_nominal.iter().enumerate() {
                let mut foot = base + rot_z(s.yaw, p);
                foot[2] = terrain.height(foot[0], foot[1]);
                xi.fixed_rows_mut::<3>(foot_offset(j)).copy_from(&foot);
            }
            robots[i].push(xi);
        }
    }
    ReferenceTrajectory { payload, robots }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn stance_all_true() {
        let g = build_gait_schedule(GaitPattern::Stance, 1.3, 1.0, 0.05, 0.35, 0.5, 4).unwrap();
        assert!(g.contact.iter().flatten().all(|c| *c));
    }

    #[test]
    fn trot_alternates_diagonals() {
        let g = build_gait_schedule(GaitPattern::Trot, 0.0, 0.7, 0.05, 0.35, 0.5, 4).unwrap();
        assert_eq!(g.contact.len(), 15);
        for k in 0..=6 {
            assert_eq!(g.contact[k], vec![true, false, false, true], "k = {k}");
        }
        for k in 7..=13 {
            assert_eq!(g.contact[k], vec![false, true, true, false], "k = {k}");
        }
        assert_eq!(g.contact[14], g.contact[0]);
        let later = build_gait_schedule(GaitPattern::Trot, 0.35, 0.7, 0.05, 0.35, 0.5, 4).unwrap();
        assert_eq!(later.contact[0], g.contact[7]);
    }

    #[test]
    fn invalid_settings() {
        assert!(build_gait_schedule(GaitPattern::Trot, 0.0, 0.7, 0.05, 0.35, 0.0, 4).is_err());
        assert!(build_gait_schedule(GaitPattern::Trot, 0.0, 0.7, 0.05, 0.35, 1.5, 4).is_err());
        assert!(build_gait_schedule(GaitPattern::Trot, 0.0, 0.7, 0.03, 0.35, 0.5, 4).is_err());
        assert!(build_gait_schedule(GaitPattern::Trot, 0.0, 0.7, 0.05, -1.0, 0.5, 4).is_err());
    }

    #[test]
    fn midpoint_and_rotated_offset() {
        let path = PayloadPath::new(&[
            Waypoint { t: 0.0, position: [0.0, 0.0, 0.5], yaw: 0.0 },
            Waypoint { t: 65.0, position: [6.5, 0.0, 0.5], yaw: 0.0 },
        ])
        .unwrap();
        let s = path.sample(32.5);
        assert!((s.position - Vector3::new(3.25, 0.0, 0.5)).norm() < 1e-12);

        let turn = PayloadPath::new(&[
            Waypoint { t: 0.0, position: [0.0, 0.0, 0.5], yaw: FRAC_PI_2 },
            Waypoint { t: 1.0, position: [0.0, 0.0, 0.5], yaw: FRAC_PI_2 },
        ])
        .unwrap();
        let terrain = Terrain::default();
        let offsets = [Vector3::new(-0.9, 0.0, 0.0)];
        let feet = [Vector3::new(0.3, 0.2, -0.4)];
        let geom = ReferenceGeometry { terrain: &terrain, formation_offsets: &offsets, foot_nominal: &feet };
        let g = build_gait_schedule(GaitPattern::Stance, 0.0, 0.1, 0.05, 0.35, 0.5, 1).unwrap();
        let refs = generate_references(&turn, &geom, &g);
        let base = refs.robots[0][0].fixed_rows::<3>(POS).into_owned();
        assert!((base - Vector3::new(0.0, -0.9, 0.5)).norm() < 1e-12);
    }

    #[test]
    fn yaw_shortest_arc() {
        let path = PayloadPath::new(&[
            Waypoint { t: 0.0, position: [0.0; 3], yaw: 3.0 },
            Waypoint { t: 1.0, position: [0.0; 3], yaw: -3.0 },
        ])
        .unwrap();
        let end = path.sample(1.0).yaw;
        assert!((end - (2.0 * std::f64::consts::PI - 3.0)).abs() < 1e-12);
    }
}
