//! Pure residual evaluators. Equalities follow `g = 0`, inequalities `h <= 0`.

use nalgebra::{Matrix3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::terrain::{ConvexRegion, Obstacle, Terrain};
use crate::model::rotation::{rotation, rotation_partials};

/// Smoothing radius of the tangential-force norm.
pub const CONE_SMOOTHING: f64 = 1e-3;

/// Friction-cone residuals and their partials with respect to the force and the normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeResidual {
    pub values: [f64; 2],
    pub d_force: SMatrix<f64, 2, 3>,
    pub d_normal: SMatrix<f64, 2, 3>,
}

/// `[-f.n, |f - (f.n) n|_s - mu (f.n)]`.
pub fn friction_cone(f: &Vector3<f64>, n: &Vector3<f64>, mu: f64) -> ConeResidual {
    let fn_ = f.dot(n);
    let ft = f - n * fn_;
    let s = (ft.norm_squared() + CONE_SMOOTHING * CONE_SMOOTHING).sqrt();
    let smoothed = s - CONE_SMOOTHING;
    let g = ft / s;
    let mut d_force = SMatrix::<f64, 2, 3>::zeros();
    let mut d_normal = SMatrix::<f64, 2, 3>::zeros();
    d_force.set_row(0, &(-n.transpose()));
    d_normal.set_row(0, &(-f.transpose()));
    d_force.set_row(1, &(g - n * mu).transpose());
    d_normal.set_row(1, &(-(g * fn_) - f * mu).transpose());
    ConeResidual {
        values: [-fn_, smoothed - mu * fn_],
        d_force,
        d_normal,
    }
}

/// Per-axis bounds on the manipulation torque.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WrenchBox {
    pub tau_min: Vector3<f64>,
    pub tau_max: Vector3<f64>,
}

impl WrenchBox {
    pub fn symmetric(limit: f64) -> Self {
        Self {
            tau_min: Vector3::repeat(-limit),
            tau_max: Vector3::repeat(limit),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if (0..3).any(|a| self.tau_min[a] > self.tau_max[a]) {
            return Err("tau_min must not exceed tau_max".into());
        }
        Ok(())
    }
}

impl Default for WrenchBox {
    fn default() -> Self {
        Self::symmetric(5.0)
    }
}

/// Grasp normal: payload z axis rotated into the world.
pub fn grasp_normal(theta0: &Vector3<f64>) -> Vector3<f64> {
    rotation(theta0).column(2).into_owned()
}

/// `d grasp_normal / d theta0`.
pub fn grasp_normal_jacobian(theta0: &Vector3<f64>) -> Matrix3<f64> {
    let dr = rotation_partials(theta0);
    Matrix3::from_columns(&[dr[0].column(2), dr[1].column(2), dr[2].column(2)])
}

/// Cone on the payload-side reaction `-f_h` followed by the torque box: 8 residuals.
pub fn manipulation_wrench_constraints(
    f_h: &Vector3<f64>,
    tau_h: &Vector3<f64>,
    n_h: &Vector3<f64>,
    mu: f64,
    bounds: &WrenchBox,
) -> [f64; 8] {
    let cone = friction_cone(&(-f_h), n_h, mu);
    let mut out = [0.0; 8];
    out[..2].copy_from_slice(&cone.values);
    for a in 0..3 {
        out[2 + a] = bounds.tau_min[a] - tau_h[a];
        out[5 + a] = tau_h[a] - bounds.tau_max[a];
    }
    out
}

/// Stance pins the foot (`p_dot = 0`), swing removes the contact force (`f = 0`).
pub fn contact_equalities(in_contact: bool, p_dot_foot: &Vector3<f64>, f_foot: &Vector3<f64>) -> Vector3<f64> {
    if in_contact {
        *p_dot_foot
    } else {
        *f_foot
    }
}

/// `[d - hw; -d - hw]` for a deviation `d` inside a box of half widths `hw`.
pub fn box_residuals(d: &Vector3<f64>, half_widths: &Vector3<f64>) -> [f64; 6] {
    let mut out = [0.0; 6];
    for a in 0..3 {
        out[a] = d[a] - half_widths[a];
        out[3 + a] = -d[a] - half_widths[a];
    }
    out
}

/// Foot position in the base frame must stay within a box around its nominal offset.
pub fn foot_kinematics_box(
    p_foot: &Vector3<f64>,
    r_base: &Vector3<f64>,
    theta_base: &Vector3<f64>,
    nominal_offset: &Vector3<f64>,
    half_widths: &Vector3<f64>,
) -> [f64; 6] {
    let d = rotation(theta_base).transpose() * (p_foot - r_base) - nominal_offset;
    box_residuals(&d, half_widths)
}

/// Foothold residuals for one foot.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlacementResidual {
    /// `p_z - height(p_xy)`; `None` in swing.
    pub height: Option<f64>,
    /// `a_q . p_xy - b_q` per half-plane of the attached region.
    pub region: Vec<f64>,
}

pub fn foot_placement(
    p_foot: &Vector3<f64>,
    terrain: &Terrain,
    region: Option<&ConvexRegion>,
    in_contact: bool,
) -> PlacementResidual {
    if !in_contact {
        return PlacementResidual::default();
    }
    let xy = Vector2::new(p_foot[0], p_foot[1]);
    PlacementResidual {
        height: Some(p_foot[2] - terrain.height(p_foot[0], p_foot[1])),
        region: region
            .map(|r| r.half_planes().iter().map(|(a, b)| a.dot(&xy) - b).collect())
            .unwrap_or_default(),
    }
}

/// `h(p) = |p_xy - c|^2 - (radius + r_body)^2`.
pub fn obstacle_distance(p: &Vector2<f64>, obstacle: &Obstacle, r_body: f64) -> f64 {
    let c = Vector2::from(obstacle.center);
    (p - c).norm_squared() - (obstacle.radius + r_body).powi(2)
}

/// Discrete-time CBF decrease condition `(1 - gamma) h(p_k) - h(p_{k+1}) <= 0`.
pub fn cbf_obstacle(p_k: &Vector2<f64>, p_k1: &Vector2<f64>, obstacle: &Obstacle, gamma: f64, r_body: f64) -> f64 {
    (1.0 - gamma) * obstacle_distance(p_k, obstacle, r_body) - obstacle_distance(p_k1, obstacle, r_body)
}

/// Arm workspace box: the grasp point seen from the robot base must stay near
/// `nominal_arm_offset`. The same expression serves both sides; whichever pose is
/// frozen is simply passed in from the previous iteration.
pub fn arm_kinematics(
    robot_pose: (&Vector3<f64>, &Vector3<f64>),
    payload_pose: (&Vector3<f64>, &Vector3<f64>),
    handle_offset: &Vector3<f64>,
    nominal_arm_offset: &Vector3<f64>,
    p_h_max: &Vector3<f64>,
) -> [f64; 6] {
    let grasp = crate::model::arm_ee_position(payload_pose.0, payload_pose.1, handle_offset);
    let d = rotation(robot_pose.1).transpose() * (grasp - robot_pose.0) - nominal_arm_offset;
    box_residuals(&d, p_h_max)
}

/// Robot base offset from the payload, in the payload frame, bounded around its nominal value.
pub fn formation(
    r_i: &Vector3<f64>,
    payload_pose: (&Vector3<f64>, &Vector3<f64>),
    nominal_offset: &Vector3<f64>,
    bound: &Vector3<f64>,
) -> [f64; 6] {
    let d = rotation(payload_pose.1).transpose() * (r_i - payload_pose.0) - nominal_offset;
    box_residuals(&d, bound)
}

/// Relaxed logarithmic barrier on `z` (`z = -h`): `(value, d/dz, d2/dz2)`.
///
/// `-mu ln z` above `delta`, continued below by the quadratic that matches value and
/// both derivatives at the knot.
pub fn relaxed_log_barrier(z: f64, delta: f64, mu: f64) -> (f64, f64, f64) {
    if z > delta {
        (-mu * z.ln(), -mu / z, mu / (z * z))
    } else {
        let t = (z - 2.0 * delta) / delta;
        (
            mu * (0.5 * t * t - 0.5 - delta.ln()),
            mu * t / delta,
            mu / (delta * delta),
        )
    }
}
