use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::rotation::{attitude_rates, rotation, rotation_partials, skew};
use super::ModelError;

/// Offsets of the rigid-body blocks inside a state vector.
pub const POS: usize = 0;
pub const VEL: usize = 3;
pub const EULER: usize = 6;
pub const MOMENTUM: usize = 9;
/// Dimension of a bare rigid-body state.
pub const RIGID_BODY_DIM: usize = 12;

/// Position, velocity, ZYX Euler angles and world-frame angular momentum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidBodyState {
    pub r: Vector3<f64>,
    pub r_dot: Vector3<f64>,
    pub theta: Vector3<f64>,
    pub l: Vector3<f64>,
}

impl RigidBodyState {
    pub fn at_rest(r: Vector3<f64>, yaw: f64) -> Self {
        Self {
            r,
            theta: Vector3::new(yaw, 0.0, 0.0),
            ..Default::default()
        }
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            r: Vector3::from_column_slice(&x[POS..POS + 3]),
            r_dot: Vector3::from_column_slice(&x[VEL..VEL + 3]),
            theta: Vector3::from_column_slice(&x[EULER..EULER + 3]),
            l: Vector3::from_column_slice(&x[MOMENTUM..MOMENTUM + 3]),
        }
    }

    pub fn write_to(&self, out: &mut [f64]) {
        out[POS..POS + 3].copy_from_slice(self.r.as_slice());
        out[VEL..VEL + 3].copy_from_slice(self.r_dot.as_slice());
        out[EULER..EULER + 3].copy_from_slice(self.theta.as_slice());
        out[MOMENTUM..MOMENTUM + 3].copy_from_slice(self.l.as_slice());
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(RIGID_BODY_DIM);
        self.write_to(v.as_mut_slice());
        v
    }

    pub fn pose(&self) -> Pose {
        Pose {
            position: self.r,
            euler: self.theta,
        }
    }

    pub fn is_valid(&self) -> bool {
        let finite = [self.r, self.r_dot, self.theta, self.l]
            .iter()
            .all(|v| v.iter().all(|c| c.is_finite()));
        finite && self.theta[1].abs() < std::f64::consts::FRAC_PI_2
    }
}

/// Position and orientation of a body.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub euler: Vector3<f64>,
}

impl Pose {
    pub fn from_state(x: &[f64]) -> Self {
        Self {
            position: Vector3::from_column_slice(&x[POS..POS + 3]),
            euler: Vector3::from_column_slice(&x[EULER..EULER + 3]),
        }
    }
}

/// Robot base plus stacked foot positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub body: RigidBodyState,
    pub p_feet: Vec<Vector3<f64>>,
}

impl RobotState {
    pub fn dim(n_feet: usize) -> usize {
        RIGID_BODY_DIM + 3 * n_feet
    }

    pub fn from_slice(x: &[f64], n_feet: usize) -> Self {
        Self {
            body: RigidBodyState::from_slice(x),
            p_feet: (0..n_feet)
                .map(|j| Vector3::from_column_slice(&x[foot_offset(j)..foot_offset(j) + 3]))
                .collect(),
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(Self::dim(self.p_feet.len()));
        self.body.write_to(v.as_mut_slice());
        for (j, p) in self.p_feet.iter().enumerate() {
            v.as_mut_slice()[foot_offset(j)..foot_offset(j) + 3].copy_from_slice(p.as_slice());
        }
        v
    }
}

/// Index of foot `j` position inside a robot state.
pub const fn foot_offset(j: usize) -> usize {
    RIGID_BODY_DIM + 3 * j
}

/// Layout of a robot control vector `[f_feet, p_dot_feet, f_h, tau_h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlLayout {
    pub n_feet: usize,
}

impl ControlLayout {
    pub const fn dim(&self) -> usize {
        6 * self.n_feet + 6
    }
    pub const fn force(&self, j: usize) -> usize {
        3 * j
    }
    pub const fn foot_velocity(&self, j: usize) -> usize {
        3 * self.n_feet + 3 * j
    }
    pub const fn hand_force(&self) -> usize {
        6 * self.n_feet
    }
    pub const fn hand_torque(&self) -> usize {
        6 * self.n_feet + 3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotControl {
    pub f_feet: Vec<Vector3<f64>>,
    pub p_dot_feet: Vec<Vector3<f64>>,
    pub f_h: Vector3<f64>,
    pub tau_h: Vector3<f64>,
}

impl RobotControl {
    pub fn zeros(n_feet: usize) -> Self {
        Self {
            f_feet: vec![Vector3::zeros(); n_feet],
            p_dot_feet: vec![Vector3::zeros(); n_feet],
            f_h: Vector3::zeros(),
            tau_h: Vector3::zeros(),
        }
    }

    pub fn from_slice(u: &[f64], n_feet: usize) -> Self {
        let lay = ControlLayout { n_feet };
        let v3 = |o: usize| Vector3::from_column_slice(&u[o..o + 3]);
        Self {
            f_feet: (0..n_feet).map(|j| v3(lay.force(j))).collect(),
            p_dot_feet: (0..n_feet).map(|j| v3(lay.foot_velocity(j))).collect(),
            f_h: v3(lay.hand_force()),
            tau_h: v3(lay.hand_torque()),
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.f_feet.len();
        let lay = ControlLayout { n_feet: n };
        let mut u = DVector::zeros(lay.dim());
        let s = u.as_mut_slice();
        for j in 0..n {
            s[lay.force(j)..lay.force(j) + 3].copy_from_slice(self.f_feet[j].as_slice());
            s[lay.foot_velocity(j)..lay.foot_velocity(j) + 3]
                .copy_from_slice(self.p_dot_feet[j].as_slice());
        }
        s[lay.hand_force()..lay.hand_force() + 3].copy_from_slice(self.f_h.as_slice());
        s[lay.hand_torque()..lay.hand_torque() + 3].copy_from_slice(self.tau_h.as_slice());
        u
    }
}

/// Payload-side copies of every robot's manipulation wrench, six entries per robot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadControl {
    pub f_bar: Vec<Vector3<f64>>,
    pub tau_bar: Vec<Vector3<f64>>,
}

impl PayloadControl {
    pub fn zeros(robots: usize) -> Self {
        Self {
            f_bar: vec![Vector3::zeros(); robots],
            tau_bar: vec![Vector3::zeros(); robots],
        }
    }

    pub fn from_slice(u: &[f64]) -> Self {
        let r = u.len() / 6;
        Self {
            f_bar: (0..r).map(|i| Vector3::from_column_slice(&u[6 * i..6 * i + 3])).collect(),
            tau_bar: (0..r).map(|i| Vector3::from_column_slice(&u[6 * i + 3..6 * i + 6])).collect(),
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut u = DVector::zeros(6 * self.f_bar.len());
        for i in 0..self.f_bar.len() {
            u.as_mut_slice()[6 * i..6 * i + 3].copy_from_slice(self.f_bar[i].as_slice());
            u.as_mut_slice()[6 * i + 3..6 * i + 6].copy_from_slice(self.tau_bar[i].as_slice());
        }
        u
    }
}

/// Mass properties of one rigid body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyParams {
    pub mass: f64,
    pub inertia_body: Matrix3<f64>,
    #[serde(default = "default_gravity")]
    pub gravity: Vector3<f64>,
    /// Grasp points in the payload frame; empty for robots.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub handle_offsets: Vec<Vector3<f64>>,
}

pub fn default_gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -9.81)
}

impl BodyParams {
    pub fn new(mass: f64, inertia_diag: Vector3<f64>) -> Self {
        Self {
            mass,
            inertia_body: Matrix3::from_diagonal(&inertia_diag),
            gravity: default_gravity(),
            handle_offsets: Vec::new(),
        }
    }

    pub fn with_handles(mut self, handles: Vec<Vector3<f64>>) -> Self {
        self.handle_offsets = handles;
        self
    }

    pub fn inertia_inverse(&self) -> Matrix3<f64> {
        self.inertia_body
            .try_inverse()
            .expect("inertia validated as positive definite")
    }

    /// Returns a description of the first violated invariant, if any.
    pub fn validate(&self) -> Result<(), String> {
        if !(self.mass.is_finite() && self.mass > 0.0) {
            return Err(format!("mass must be positive, got {}", self.mass));
        }
        let i = &self.inertia_body;
        if (i - i.transpose()).amax() > 1e-12 * i.amax().max(1.0) {
            return Err("inertia_body must be symmetric".into());
        }
        if i.cholesky().is_none() {
            return Err("inertia_body must be positive definite".into());
        }
        if !self.gravity.iter().all(|g| g.is_finite()) {
            return Err("gravity must be finite".into());
        }
        Ok(())
    }
}

/// World-frame grasp point for a handle fixed in the payload frame.
pub fn arm_ee_position(r0: &Vector3<f64>, theta0: &Vector3<f64>, handle_offset: &Vector3<f64>) -> Vector3<f64> {
    r0 + rotation(theta0) * handle_offset
}

/// Continuous-time dynamics of one subsystem, evaluated at a horizon knot.
///
/// `knot` selects time-varying exogenous data (for instance a frozen payload pose);
/// implementations without such data ignore it.
pub trait Dynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn derivative(&self, knot: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError>;
    /// `(df/dx, df/du)` at the given point.
    fn jacobians(
        &self,
        knot: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError>;
}

/// Kinematic part of a rigid-body derivative: `r_dot`, `theta_dot` and the linear acceleration.
fn rigid_body_kinematics(
    x: &[f64],
    force: &Vector3<f64>,
    moment: &Vector3<f64>,
    params: &BodyParams,
    inertia_inv: &Matrix3<f64>,
    out: &mut [f64],
) -> Result<(Matrix3<f64>, Matrix3<f64>), ModelError> {
    let st = RigidBodyState::from_slice(x);
    let (rates, d_theta, d_l) = attitude_rates(&st.theta, &st.l, inertia_inv)?;
    let acc = force / params.mass + params.gravity;
    out[POS..POS + 3].copy_from_slice(st.r_dot.as_slice());
    out[VEL..VEL + 3].copy_from_slice(acc.as_slice());
    out[EULER..EULER + 3].copy_from_slice(rates.as_slice());
    out[MOMENTUM..MOMENTUM + 3].copy_from_slice(moment.as_slice());
    Ok((d_theta, d_l))
}

fn write_block(m: &mut DMatrix<f64>, r: usize, c: usize, b: &Matrix3<f64>) {
    m.fixed_view_mut::<3, 3>(r, c).copy_from(b);
}

fn rigid_body_state_jacobian(fx: &mut DMatrix<f64>, base: usize, d_theta: &Matrix3<f64>, d_l: &Matrix3<f64>) {
    write_block(fx, base + POS, base + VEL, &Matrix3::identity());
    write_block(fx, base + EULER, base + EULER, d_theta);
    write_block(fx, base + EULER, base + MOMENTUM, d_l);
}

/// Payload driven by the wrench copies `u0` (distributed planner form).
#[derive(Debug, Clone)]
pub struct PayloadCopyDynamics {
    params: Arc<BodyParams>,
    inertia_inv: Matrix3<f64>,
}

impl PayloadCopyDynamics {
    pub fn new(params: Arc<BodyParams>) -> Self {
        let inertia_inv = params.inertia_inverse();
        Self { params, inertia_inv }
    }

    fn wrench(&self, x: &[f64], u: &[f64]) -> (Vector3<f64>, Vector3<f64>) {
        let rot = rotation(&Vector3::from_column_slice(&x[EULER..EULER + 3]));
        let mut force = Vector3::zeros();
        let mut moment = Vector3::zeros();
        for (i, d) in self.params.handle_offsets.iter().enumerate() {
            let f_bar = Vector3::from_column_slice(&u[6 * i..6 * i + 3]);
            let tau_bar = Vector3::from_column_slice(&u[6 * i + 3..6 * i + 6]);
            force += f_bar;
            moment += (rot * d).cross(&f_bar) + tau_bar;
        }
        (force, moment)
    }
}

impl Dynamics for PayloadCopyDynamics {
    fn state_dim(&self) -> usize {
        RIGID_BODY_DIM
    }

    fn control_dim(&self) -> usize {
        6 * self.params.handle_offsets.len()
    }

    fn derivative(&self, _knot: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let (force, moment) = self.wrench(x.as_slice(), u.as_slice());
        let mut out = DVector::zeros(RIGID_BODY_DIM);
        rigid_body_kinematics(x.as_slice(), &force, &moment, &self.params, &self.inertia_inv, out.as_mut_slice())?;
        Ok(out)
    }

    fn jacobians(
        &self,
        _knot: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        let (force, moment) = self.wrench(x.as_slice(), u.as_slice());
        let mut scratch = [0.0; RIGID_BODY_DIM];
        let (d_theta, d_l) =
            rigid_body_kinematics(x.as_slice(), &force, &moment, &self.params, &self.inertia_inv, &mut scratch)?;
        let mut fx = DMatrix::zeros(RIGID_BODY_DIM, RIGID_BODY_DIM);
        let mut fu = DMatrix::zeros(RIGID_BODY_DIM, self.control_dim());
        rigid_body_state_jacobian(&mut fx, 0, &d_theta, &d_l);
        let theta = Vector3::from_column_slice(&x.as_slice()[EULER..EULER + 3]);
        let rot = rotation(&theta);
        let drot = rotation_partials(&theta);
        let inv_m = Matrix3::identity() / self.params.mass;
        for (i, d) in self.params.handle_offsets.iter().enumerate() {
            let f_bar = Vector3::from_column_slice(&u.as_slice()[6 * i..6 * i + 3]);
            for (j, dr) in drot.iter().enumerate() {
                let col = (dr * d).cross(&f_bar);
                for a in 0..3 {
                    fx[(MOMENTUM + a, EULER + j)] += col[a];
                }
            }
            write_block(&mut fu, VEL, 6 * i, &inv_m);
            write_block(&mut fu, MOMENTUM, 6 * i, &skew(&(rot * d)));
            write_block(&mut fu, MOMENTUM, 6 * i + 3, &Matrix3::identity());
        }
        Ok((fx, fu))
    }
}

/// One robot with the payload pose frozen per knot (distributed planner form).
#[derive(Debug, Clone)]
pub struct RobotDynamics {
    params: Arc<BodyParams>,
    inertia_inv: Matrix3<f64>,
    n_feet: usize,
    handle_offset: Vector3<f64>,
    payload_poses: Vec<Pose>,
}

impl RobotDynamics {
    /// `payload_poses[k]` is used when the derivative is evaluated at knot `k`;
    /// knots past the end reuse the last pose.
    pub fn new(params: Arc<BodyParams>, n_feet: usize, handle_offset: Vector3<f64>, payload_poses: Vec<Pose>) -> Self {
        assert!(!payload_poses.is_empty(), "robot dynamics need at least one payload pose");
        let inertia_inv = params.inertia_inverse();
        Self {
            params,
            inertia_inv,
            n_feet,
            handle_offset,
            payload_poses,
        }
    }

    fn payload_pose(&self, knot: usize) -> &Pose {
        &self.payload_poses[knot.min(self.payload_poses.len() - 1)]
    }
}

/// Force, moment and their partials for one robot. Shared by the distributed and stacked forms.
struct RobotWrench {
    force: Vector3<f64>,
    moment: Vector3<f64>,
    grasp_point: Vector3<f64>,
}

fn robot_wrench(x: &[f64], u: &[f64], n_feet: usize, grasp_point: Vector3<f64>) -> RobotWrench {
    let lay = ControlLayout { n_feet };
    let r = Vector3::from_column_slice(&x[POS..POS + 3]);
    let f_h = Vector3::from_column_slice(&u[lay.hand_force()..lay.hand_force() + 3]);
    let tau_h = Vector3::from_column_slice(&u[lay.hand_torque()..lay.hand_torque() + 3]);
    let mut force = f_h;
    let mut moment = (grasp_point - r).cross(&f_h) + tau_h;
    for j in 0..n_feet {
        let f = Vector3::from_column_slice(&u[lay.force(j)..lay.force(j) + 3]);
        let p = Vector3::from_column_slice(&x[foot_offset(j)..foot_offset(j) + 3]);
        force += f;
        moment += (p - r).cross(&f);
    }
    RobotWrench {
        force,
        moment,
        grasp_point,
    }
}

/// Fills the robot's own-state and own-control Jacobian blocks at offsets `(xb, ub)`.
#[allow(clippy::too_many_arguments)]
fn robot_jacobian_blocks(
    x: &[f64],
    u: &[f64],
    n_feet: usize,
    w: &RobotWrench,
    params: &BodyParams,
    d_theta: &Matrix3<f64>,
    d_l: &Matrix3<f64>,
    fx: &mut DMatrix<f64>,
    xb: usize,
    fu: &mut DMatrix<f64>,
    ub: usize,
) {
    let lay = ControlLayout { n_feet };
    rigid_body_state_jacobian(fx, xb, d_theta, d_l);
    let r = Vector3::from_column_slice(&x[POS..POS + 3]);
    let f_h = Vector3::from_column_slice(&u[lay.hand_force()..lay.hand_force() + 3]);
    let inv_m = Matrix3::identity() / params.mass;
    // d moment / d r = sum skew(f)
    let mut dm_dr = skew(&f_h);
    for j in 0..n_feet {
        let f = Vector3::from_column_slice(&u[lay.force(j)..lay.force(j) + 3]);
        let p = Vector3::from_column_slice(&x[foot_offset(j)..foot_offset(j) + 3]);
        dm_dr += skew(&f);
        write_block(fx, xb + MOMENTUM, xb + foot_offset(j), &(-skew(&f)));
        write_block(fu, xb + VEL, ub + lay.force(j), &inv_m);
        write_block(fu, xb + MOMENTUM, ub + lay.force(j), &skew(&(p - r)));
        write_block(fu, xb + foot_offset(j), ub + lay.foot_velocity(j), &Matrix3::identity());
    }
    write_block(fx, xb + MOMENTUM, xb + POS, &dm_dr);
    write_block(fu, xb + VEL, ub + lay.hand_force(), &inv_m);
    write_block(fu, xb + MOMENTUM, ub + lay.hand_force(), &skew(&(w.grasp_point - r)));
    write_block(fu, xb + MOMENTUM, ub + lay.hand_torque(), &Matrix3::identity());
}

fn robot_derivative_into(
    x: &[f64],
    u: &[f64],
    n_feet: usize,
    w: &RobotWrench,
    params: &BodyParams,
    inertia_inv: &Matrix3<f64>,
    out: &mut [f64],
) -> Result<(Matrix3<f64>, Matrix3<f64>), ModelError> {
    let lay = ControlLayout { n_feet };
    let jac = rigid_body_kinematics(x, &w.force, &w.moment, params, inertia_inv, out)?;
    for j in 0..n_feet {
        out[foot_offset(j)..foot_offset(j) + 3].copy_from_slice(&u[lay.foot_velocity(j)..lay.foot_velocity(j) + 3]);
    }
    Ok(jac)
}

impl Dynamics for RobotDynamics {
    fn state_dim(&self) -> usize {
        RobotState::dim(self.n_feet)
    }

    fn control_dim(&self) -> usize {
        ControlLayout { n_feet: self.n_feet }.dim()
    }

    fn derivative(&self, knot: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let pose = self.payload_pose(knot);
        let grasp = arm_ee_position(&pose.position, &pose.euler, &self.handle_offset);
        let w = robot_wrench(x.as_slice(), u.as_slice(), self.n_feet, grasp);
        let mut out = DVector::zeros(self.state_dim());
        robot_derivative_into(
            x.as_slice(),
            u.as_slice(),
            self.n_feet,
            &w,
            &self.params,
            &self.inertia_inv,
            out.as_mut_slice(),
        )?;
        Ok(out)
    }

    fn jacobians(
        &self,
        knot: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        let pose = self.payload_pose(knot);
        let grasp = arm_ee_position(&pose.position, &pose.euler, &self.handle_offset);
        let w = robot_wrench(x.as_slice(), u.as_slice(), self.n_feet, grasp);
        let mut scratch = vec![0.0; self.state_dim()];
        let (d_theta, d_l) = robot_derivative_into(
            x.as_slice(),
            u.as_slice(),
            self.n_feet,
            &w,
            &self.params,
            &self.inertia_inv,
            &mut scratch,
        )?;
        let mut fx = DMatrix::zeros(self.state_dim(), self.state_dim());
        let mut fu = DMatrix::zeros(self.state_dim(), self.control_dim());
        robot_jacobian_blocks(
            x.as_slice(),
            u.as_slice(),
            self.n_feet,
            &w,
            &self.params,
            &d_theta,
            &d_l,
            &mut fx,
            0,
            &mut fu,
            0,
        );
        Ok((fx, fu))
    }
}

/// The undecomposed system: payload followed by every robot, driven by robot wrenches.
///
/// State `[x_0; x_1; ..; x_R]`, control `[u_1; ..; u_R]`.
#[derive(Debug, Clone)]
pub struct StackedDynamics {
    payload: Arc<BodyParams>,
    payload_inertia_inv: Matrix3<f64>,
    robots: Vec<Arc<BodyParams>>,
    robot_inertia_inv: Vec<Matrix3<f64>>,
    n_feet: usize,
}

impl StackedDynamics {
    pub fn new(payload: Arc<BodyParams>, robots: Vec<Arc<BodyParams>>, n_feet: usize) -> Self {
        assert_eq!(
            payload.handle_offsets.len(),
            robots.len(),
            "one handle per robot is required"
        );
        Self {
            payload_inertia_inv: payload.inertia_inverse(),
            robot_inertia_inv: robots.iter().map(|r| r.inertia_inverse()).collect(),
            payload,
            robots,
            n_feet,
        }
    }

    pub fn robots(&self) -> usize {
        self.robots.len()
    }

    pub fn n_feet(&self) -> usize {
        self.n_feet
    }

    pub fn robot_state_offset(&self, i: usize) -> usize {
        RIGID_BODY_DIM + i * RobotState::dim(self.n_feet)
    }

    pub fn robot_control_offset(&self, i: usize) -> usize {
        i * ControlLayout { n_feet: self.n_feet }.dim()
    }

    fn eval(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        mut jac: Option<(&mut DMatrix<f64>, &mut DMatrix<f64>)>,
    ) -> Result<DVector<f64>, ModelError> {
        let xs = x.as_slice();
        let us = u.as_slice();
        let lay = ControlLayout { n_feet: self.n_feet };
        let nr = RobotState::dim(self.n_feet);
        let mut out = DVector::zeros(self.state_dim());
        let r0 = Vector3::from_column_slice(&xs[POS..POS + 3]);
        let theta0 = Vector3::from_column_slice(&xs[EULER..EULER + 3]);
        let rot0 = rotation(&theta0);
        let drot0 = rotation_partials(&theta0);

        let mut p_force = Vector3::zeros();
        let mut p_moment = Vector3::zeros();
        for (i, robot) in self.robots.iter().enumerate() {
            let xo = self.robot_state_offset(i);
            let uo = self.robot_control_offset(i);
            let xi = &xs[xo..xo + nr];
            let ui = &us[uo..uo + lay.dim()];
            let d = &self.payload.handle_offsets[i];
            let lever = rot0 * d;
            let grasp = r0 + lever;
            let f_h = Vector3::from_column_slice(&ui[lay.hand_force()..lay.hand_force() + 3]);
            let tau_h = Vector3::from_column_slice(&ui[lay.hand_torque()..lay.hand_torque() + 3]);
            p_force -= f_h;
            p_moment += lever.cross(&(-f_h)) - tau_h;

            let w = robot_wrench(xi, ui, self.n_feet, grasp);
            let (d_theta, d_l) = robot_derivative_into(
                xi,
                ui,
                self.n_feet,
                &w,
                robot,
                &self.robot_inertia_inv[i],
                &mut out.as_mut_slice()[xo..xo + nr],
            )?;
            if let Some((fx, fu)) = jac.as_mut() {
                robot_jacobian_blocks(xi, ui, self.n_feet, &w, robot, &d_theta, &d_l, fx, xo, fu, uo);
                // Robot moment depends on the live grasp point.
                let neg_skew_f = -skew(&f_h);
                write_block(fx, xo + MOMENTUM, POS, &neg_skew_f);
                for (j, dr) in drot0.iter().enumerate() {
                    let col = neg_skew_f * (dr * d);
                    let pcol = (dr * d).cross(&(-f_h));
                    for a in 0..3 {
                        fx[(xo + MOMENTUM + a, EULER + j)] += col[a];
                        fx[(MOMENTUM + a, EULER + j)] += pcol[a];
                    }
                }
                // Payload reacts with the negated wrench.
                write_block(fu, VEL, uo + lay.hand_force(), &(-Matrix3::identity() / self.payload.mass));
                write_block(fu, MOMENTUM, uo + lay.hand_force(), &(-skew(&lever)));
                write_block(fu, MOMENTUM, uo + lay.hand_torque(), &(-Matrix3::identity()));
            }
        }
        let (d_theta0, d_l0) = rigid_body_kinematics(
            &xs[..RIGID_BODY_DIM],
            &p_force,
            &p_moment,
            &self.payload,
            &self.payload_inertia_inv,
            &mut out.as_mut_slice()[..RIGID_BODY_DIM],
        )?;
        if let Some((fx, _)) = jac.as_mut() {
            rigid_body_state_jacobian(fx, 0, &d_theta0, &d_l0);
        }
        Ok(out)
    }
}

impl Dynamics for StackedDynamics {
    fn state_dim(&self) -> usize {
        RIGID_BODY_DIM + self.robots.len() * RobotState::dim(self.n_feet)
    }

    fn control_dim(&self) -> usize {
        self.robots.len() * ControlLayout { n_feet: self.n_feet }.dim()
    }

    fn derivative(&self, _knot: usize, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        self.eval(x, u, None)
    }

    fn jacobians(
        &self,
        _knot: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
        let mut fx = DMatrix::zeros(self.state_dim(), self.state_dim());
        let mut fu = DMatrix::zeros(self.state_dim(), self.control_dim());
        self.eval(x, u, Some((&mut fx, &mut fu)))?;
        Ok((fx, fu))
    }
}

/// Payload state derivative under the wrench copies.
pub fn payload_dynamics(
    x0: &RigidBodyState,
    u0: &PayloadControl,
    params: &BodyParams,
) -> Result<DVector<f64>, ModelError> {
    let dynamics = PayloadCopyDynamics::new(Arc::new(params.clone()));
    dynamics.derivative(0, &x0.to_vector(), &u0.to_vector())
}

/// Robot state derivative with the payload pose held at `payload_pose`.
pub fn robot_dynamics(
    xi: &RobotState,
    ui: &RobotControl,
    payload_pose: &Pose,
    handle_offset: &Vector3<f64>,
    params: &BodyParams,
) -> Result<DVector<f64>, ModelError> {
    let dynamics = RobotDynamics::new(
        Arc::new(params.clone()),
        xi.p_feet.len(),
        *handle_offset,
        vec![*payload_pose],
    );
    dynamics.derivative(0, &xi.to_vector(), &ui.to_vector())
}
