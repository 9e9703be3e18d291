//! Assembly of the payload, robot and centralized optimal control problems of one MPC
//! window from a scenario.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector2, Vector3, Vector6};

use crate::admm::{DistributedProblem, SubTrajectories};
use crate::config::{ConfigError, ScenarioConfig};
use crate::constraints::{
    ArmConstraint, CbfConstraint, ClearanceConstraint, ConvexRegion, FootConstraint, FormationConstraint, HandConstraint,
    PoseSource, StageConstraint, Terrain,
};
use crate::cost::ConsensusTerm;
use crate::gait::{build_gait_schedule, generate_references, GaitSchedule, PayloadPath, ReferenceGeometry, ReferenceTrajectory};
use crate::model::rotation::skew;
use crate::model::step_backward_euler;
use crate::model::{
    foot_offset, BodyParams, ControlLayout, PayloadCopyDynamics, Pose, RobotDynamics, RobotState, StackedDynamics, EULER, MOMENTUM,
    POS, RIGID_BODY_DIM, VEL,
};
use crate::sqp::{OcpDefinition, Trajectory};

/// Scenario with derived geometry, shared by every window of a run.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub payload: Arc<BodyParams>,
    pub robot: Arc<BodyParams>,
    pub robots: usize,
    pub n_feet: usize,
    pub handles: Vec<Vector3<f64>>,
    pub formation: Vec<Vector3<f64>>,
    /// Grasp point relative to each robot base in the base frame at the nominal pose.
    pub arm_nominal: Vec<Vector3<f64>>,
    pub foot_nominal: Vec<Vector3<f64>>,
    pub terrain: Arc<Terrain>,
    pub regions: Vec<Arc<ConvexRegion>>,
    pub path: PayloadPath,
}

/// Joint state of the stacked system on one knot.
pub fn stack_state(payload: &DVector<f64>, robots: &[DVector<f64>]) -> DVector<f64> {
    let mut v: Vec<f64> = payload.iter().copied().collect();
    for r in robots {
        v.extend(r.iter());
    }
    DVector::from_vec(v)
}

/// Joint control `[u_1; ...; u_R]`.
pub fn stack_controls(robots: &[DVector<f64>]) -> DVector<f64> {
    DVector::from_vec(robots.iter().flat_map(|u| u.iter().copied()).collect())
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let handles = config.handle_offsets();
        let formation = config.formation_offsets();
        let arm_nominal = handles.iter().zip(&formation).map(|(h, f)| h - f).collect();
        let path = PayloadPath::new(&config.waypoints).map_err(|e| ConfigError::Validation {
            field: "waypoints".into(),
            message: e.to_string(),
        })?;
        Ok(Self {
            payload: Arc::new(config.payload_params()),
            robot: Arc::new(config.robot_params()),
            robots: config.robots,
            n_feet: config.n_feet(),
            handles,
            formation,
            arm_nominal,
            foot_nominal: config.robot.foot_nominal.clone(),
            terrain: Arc::new(config.terrain.clone()),
            regions: config.regions.iter().cloned().map(Arc::new).collect(),
            path,
            config,
        })
    }

    pub fn horizon_steps(&self) -> usize {
        (self.config.solver.horizon / self.config.solver.dt).round() as usize
    }

    pub fn dt(&self) -> f64 {
        self.config.solver.dt
    }

    pub fn layout(&self) -> ControlLayout {
        ControlLayout { n_feet: self.n_feet }
    }

    pub fn robot_state_dim(&self) -> usize {
        RobotState::dim(self.n_feet)
    }

    pub fn stacked_state_dim(&self) -> usize {
        RIGID_BODY_DIM + self.robots * self.robot_state_dim()
    }

    pub fn stacked_control_dim(&self) -> usize {
        self.robots * self.layout().dim()
    }

    pub fn gait(&self, t_start: f64) -> GaitSchedule {
        let g = &self.config.gait;
        build_gait_schedule(
            g.pattern,
            t_start,
            self.config.solver.horizon,
            self.config.solver.dt,
            g.phase_duration,
            g.duty_factor,
            self.n_feet,
        )
        .expect("gait validated with the config")
    }

    fn geometry(&self) -> ReferenceGeometry<'_> {
        ReferenceGeometry {
            terrain: &self.terrain,
            formation_offsets: &self.formation,
            foot_nominal: &self.foot_nominal,
        }
    }

    /// Payload reference pose at absolute time `t`.
    pub fn payload_reference(&self, t: f64) -> Pose {
        let s = self.path.sample(t);
        let h = self.terrain.height(s.position[0], s.position[1]);
        Pose {
            position: s.position + Vector3::new(0.0, 0.0, h),
            euler: Vector3::new(s.yaw, 0.0, 0.0),
        }
    }

    /// World state at rest on the references at `t = 0`.
    pub fn initial_world(&self) -> (DVector<f64>, Vec<DVector<f64>>) {
        let refs = generate_references(&self.path, &self.geometry(), &self.gait(0.0));
        let rest = |x: &DVector<f64>| {
            let mut x = x.clone();
            x.fixed_rows_mut::<3>(crate::model::VEL).fill(0.0);
            x
        };
        (rest(&refs.payload[0]), refs.robots.iter().map(|r| rest(&r[0])).collect())
    }

    /// Gait, references and foothold assignment of the window starting at `t_start`.
    pub fn window(&self, t_start: f64, robot_states: &[DVector<f64>]) -> Window {
        let gait = self.gait(t_start);
        let refs = generate_references(&self.path, &self.geometry(), &gait);
        let contact = (0..self.n_feet).map(|j| Arc::new(gait.foot(j))).collect::<Vec<_>>();
        let regions = (0..self.robots)
            .map(|i| {
                (0..self.n_feet)
                    .map(|j| self.assign_regions(&contact[j], &refs.robots[i], robot_states.get(i), j))
                    .collect()
            })
            .collect();
        Window {
            t_start,
            gait,
            refs,
            contact,
            regions,
        }
    }

    fn pick_region(&self, p: &Vector2<f64>) -> Arc<ConvexRegion> {
        if let Some(r) = self.regions.iter().find(|r| r.contains(p)) {
            return r.clone();
        }
        self.regions
            .iter()
            .min_by(|a, b| a.violation(p).total_cmp(&b.violation(p)))
            .expect("regions are non-empty")
            .clone()
    }

    /// One region per stance interval: the region containing (or nearest to) the
    /// reference foothold, or the current foothold for an interval already under way.
    fn assign_regions(
        &self,
        contact: &[bool],
        refs: &[DVector<f64>],
        current: Option<&DVector<f64>>,
        foot: usize,
    ) -> Vec<Option<Arc<ConvexRegion>>> {
        let mut out = vec![None; contact.len()];
        if self.regions.is_empty() {
            return out;
        }
        let o = foot_offset(foot);
        let mut k = 0;
        while k < contact.len() {
            if !contact[k] {
                k += 1;
                continue;
            }
            let start = k;
            while k < contact.len() && contact[k] {
                k += 1;
            }
            let src = match (start, current) {
                (0, Some(x)) => x,
                _ => &refs[(start + k - 1) / 2],
            };
            let region = self.pick_region(&Vector2::new(src[o], src[o + 1]));
            for slot in &mut out[start..k] {
                *slot = Some(region.clone());
            }
        }
        out
    }

    /// Dynamically consistent initial guess: the payload copies track the reference
    /// velocity and cancel angular momentum, swing feet move to their reference
    /// footholds, and stance forces are the minimum-norm split balancing each robot.
    pub fn initial_guess(&self, window: &Window, payload_x0: &DVector<f64>, robot_x0: &[DVector<f64>]) -> SubTrajectories {
        let n = window.horizon();
        let dt = self.dt();
        let lay = self.layout();
        let copies = PayloadCopyDynamics::new(self.payload.clone());
        let vec3 = |x: &DVector<f64>, o: usize| Vector3::new(x[o], x[o + 1], x[o + 2]);
        let mut payload = Trajectory {
            states: vec![payload_x0.clone()],
            controls: Vec::with_capacity(n),
        };
        for k in 0..n {
            let x = &payload.states[k];
            let acc = (vec3(&window.refs.payload[k + 1], VEL) - vec3(x, VEL)) / dt;
            let share = (acc - self.payload.gravity) * self.payload.mass / self.robots as f64;
            let torque = -vec3(x, MOMENTUM) / (dt * self.robots as f64);
            let mut u = DVector::zeros(6 * self.robots);
            for i in 0..self.robots {
                u.fixed_rows_mut::<3>(6 * i).copy_from(&share);
                u.fixed_rows_mut::<3>(6 * i + 3).copy_from(&torque);
            }
            let next = step_backward_euler(&copies, k + 1, x, &u, dt).unwrap_or_else(|_| x.clone());
            payload.controls.push(u);
            payload.states.push(next);
        }
        let pose_list: Vec<Pose> = payload.states.iter().map(|x| Pose::from_state(x.as_slice())).collect();
        let robots = (0..self.robots)
            .map(|i| {
                let dynamics = RobotDynamics::new(self.robot.clone(), self.n_feet, self.handles[i], pose_list.clone());
                let refs = &window.refs.robots[i];
                let mut traj = Trajectory {
                    states: vec![robot_x0[i].clone()],
                    controls: Vec::with_capacity(n),
                };
                for k in 0..n {
                    let x = &traj.states[k];
                    let mut u = DVector::zeros(lay.dim());
                    let f_h = -payload.controls[k].fixed_rows::<3>(6 * i).into_owned();
                    let tau_h = -payload.controls[k].fixed_rows::<3>(6 * i + 3).into_owned();
                    u.fixed_rows_mut::<3>(lay.hand_force()).copy_from(&f_h);
                    u.fixed_rows_mut::<3>(lay.hand_torque()).copy_from(&tau_h);
                    let r = vec3(x, POS) + vec3(x, VEL) * dt;
                    let stance: Vec<usize> = (0..self.n_feet).filter(|j| window.gait.contact[k][*j]).collect();
                    let mut feet = Vec::with_capacity(stance.len());
                    for j in 0..self.n_feet {
                        let o = foot_offset(j);
                        if window.gait.contact[k][j] {
                            feet.push(vec3(x, o));
                        } else {
                            let v = (vec3(&refs[k + 1], o) - vec3(x, o)) / dt;
                            u.fixed_rows_mut::<3>(lay.foot_velocity(j)).copy_from(&v);
                        }
                    }
                    if !stance.is_empty() {
                        let acc = (vec3(&refs[k + 1], VEL) - vec3(x, VEL)) / dt;
                        let grasp = crate::model::arm_ee_position(&pose_list[k + 1].position, &pose_list[k + 1].euler, &self.handles[i]);
                        let need_f = (acc - self.robot.gravity) * self.robot.mass - f_h;
                        let need_m = -vec3(x, MOMENTUM) / dt - (grasp - r).cross(&f_h) - tau_h;
                        let mut a = DMatrix::zeros(6, 3 * stance.len());
                        for (c, p) in feet.iter().enumerate() {
                            a.view_mut((0, 3 * c), (3, 3)).copy_from(&nalgebra::Matrix3::identity());
                            a.view_mut((3, 3 * c), (3, 3)).copy_from(&skew(&(p - r)));
                        }
                        let mut b = DVector::zeros(6);
                        b.fixed_rows_mut::<3>(0).copy_from(&need_f);
                        b.fixed_rows_mut::<3>(3).copy_from(&need_m);
                        // The moment about a two-foot support line is only reachable through the
                        // net force, so the moment rows are weighted above the force rows.
                        a.rows_mut(3, 3).scale_mut(GUESS_MOMENT_WEIGHT);
                        b.rows_mut(3, 3).scale_mut(GUESS_MOMENT_WEIGHT);
                        let f = a.svd(true, true).solve(&b, 1e-9).expect("svd with both factors");
                        for (c, j) in stance.iter().enumerate() {
                            u.fixed_rows_mut::<3>(lay.force(*j)).copy_from(&f.fixed_rows::<3>(3 * c));
                        }
                    }
                    let next = step_backward_euler(&dynamics, k + 1, x, &u, dt).unwrap_or_else(|_| x.clone());
                    traj.controls.push(u);
                    traj.states.push(next);
                }
                traj
            })
            .collect();
        SubTrajectories { payload, robots }
    }
}

const GUESS_MOMENT_WEIGHT: f64 = 10.0;

/// Window-specific data: contact schedule, references and foothold regions.
#[derive(Debug, Clone)]
pub struct Window {
    pub t_start: f64,
    pub gait: GaitSchedule,
    pub refs: ReferenceTrajectory,
    pub contact: Vec<Arc<Vec<bool>>>,
    /// `regions[robot][foot][knot]`.
    pub regions: Vec<Vec<Vec<Option<Arc<ConvexRegion>>>>>,
}

fn poses(states: &[DVector<f64>], offset: usize) -> Arc<Vec<Pose>> {
    Arc::new(states.iter().map(|x| Pose::from_state(&x.as_slice()[offset..])).collect())
}

impl Window {
    pub fn horizon(&self) -> usize {
        self.gait.horizon_steps()
    }

    /// Makes robot controls (block at `offset`) agree with this window's contact
    /// schedule. Knots where a swing foot carries force get the total foot force shared
    /// equally by the stance feet; swing forces and stance velocities are zeroed.
    pub fn match_contacts(&self, sc: &Scenario, controls: &mut [DVector<f64>], offset: usize) {
        let lay = sc.layout();
        for (k, u) in controls.iter_mut().enumerate() {
            let contact = &self.gait.contact[k.min(self.horizon() - 1)];
            let stance = contact.iter().filter(|c| **c).count();
            if stance == 0 {
                continue;
            }
            let mut total = Vector3::zeros();
            for j in 0..sc.n_feet {
                total += u.fixed_rows::<3>(offset + lay.force(j));
            }
            let share = total / stance as f64;
            let mismatch = (0..sc.n_feet).any(|j| !contact[j] && u.fixed_rows::<3>(offset + lay.force(j)).norm() > 0.0);
            for j in 0..sc.n_feet {
                if contact[j] {
                    if mismatch {
                        u.fixed_rows_mut::<3>(offset + lay.force(j)).copy_from(&share);
                    }
                    u.fixed_rows_mut::<3>(offset + lay.foot_velocity(j)).fill(0.0);
                } else {
                    u.fixed_rows_mut::<3>(offset + lay.force(j)).fill(0.0);
                }
            }
        }
    }

    fn robot_constraints(
        &self,
        sc: &Scenario,
        i: usize,
        state_offset: usize,
        control_offset: usize,
        payload: PoseSource,
        out: &mut Vec<Arc<dyn StageConstraint>>,
    ) {
        let c = &sc.config.constraints;
        let lay = sc.layout();
        for j in 0..sc.n_feet {
            out.push(Arc::new(FootConstraint {
                state_offset,
                control_offset,
                foot: j,
                n_feet: sc.n_feet,
                contact: self.contact[j].clone(),
                regions: self.regions[i][j].clone(),
                terrain: sc.terrain.clone(),
                nominal_offset: sc.foot_nominal[j],
                half_widths: c.foot_box,
            }));
        }
        out.push(Arc::new(HandConstraint {
            force_offset: control_offset + lay.hand_force(),
            torque_offset: control_offset + lay.hand_torque(),
            force_sign: -1.0,
            torque_sign: 1.0,
            payload: payload.clone(),
            mu: c.hand_mu,
            bounds: c.torque_box,
        }));
        let robot = PoseSource::Live { offset: state_offset };
        out.push(Arc::new(ArmConstraint {
            robot: robot.clone(),
            payload: payload.clone(),
            handle_offset: sc.handles[i],
            nominal_arm_offset: sc.arm_nominal[i],
            p_h_max: c.arm_box,
        }));
        out.push(Arc::new(FormationConstraint {
            robot,
            payload,
            nominal_offset: sc.formation[i],
            bound: c.formation_bound,
        }));
        for o in &sc.config.obstacles {
            out.push(Arc::new(CbfConstraint {
                state_offset,
                obstacle: o.clone(),
                gamma: c.cbf_gamma,
                r_body: sc.config.robot.body_radius,
            }));
        }
    }

    fn payload_body_constraints(&self, sc: &Scenario, out: &mut Vec<Arc<dyn StageConstraint>>) {
        let c = &sc.config.constraints;
        out.push(Arc::new(ClearanceConstraint {
            state_offset: 0,
            terrain: sc.terrain.clone(),
            clearance: c.clearance,
        }));
        for o in &sc.config.obstacles {
            out.push(Arc::new(CbfConstraint {
                state_offset: 0,
                obstacle: o.clone(),
                gamma: c.cbf_gamma,
                r_body: sc.config.payload.footprint_radius,
            }));
        }
    }

    /// Payload sub-block with the robots' trajectories frozen.
    pub fn payload_ocp(&self, sc: &Scenario, x0: &DVector<f64>, robots: &[Trajectory], duals: &[Vec<Vector6<f64>>], rho: f64) -> OcpDefinition {
        let n = self.horizon();
        let lay = sc.layout();
        let c = &sc.config.constraints;
        let mut constraints: Vec<Arc<dyn StageConstraint>> = Vec::new();
        self.payload_body_constraints(sc, &mut constraints);
        for i in 0..sc.robots {
            constraints.push(Arc::new(HandConstraint {
                force_offset: 6 * i,
                torque_offset: 6 * i + 3,
                force_sign: 1.0,
                torque_sign: -1.0,
                payload: PoseSource::Live { offset: 0 },
                mu: c.hand_mu,
                bounds: c.torque_box,
            }));
            constraints.push(Arc::new(ArmConstraint {
                robot: PoseSource::Fixed(poses(&robots[i].states, 0)),
                payload: PoseSource::Live { offset: 0 },
                handle_offset: sc.handles[i],
                nominal_arm_offset: sc.arm_nominal[i],
                p_h_max: c.arm_box,
            }));
        }
        let offsets = (0..n)
            .map(|k| {
                let mut v = DVector::zeros(6 * sc.robots);
                for i in 0..sc.robots {
                    let u = &robots[i].controls[k];
                    for a in 0..6 {
                        v[6 * i + a] = u[lay.hand_force() + a] + duals[i][k][a];
                    }
                }
                v
            })
            .collect();
        OcpDefinition {
            dt: sc.dt(),
            x0: x0.clone(),
            dynamics: Arc::new(PayloadCopyDynamics::new(sc.payload.clone())),
            x_ref: self.refs.payload.clone(),
            q: sc.config.weights.payload_q(),
            r: sc.config.weights.payload_r(sc.robots),
            terminal_scale: sc.config.weights.terminal_scale,
            consensus: Some(ConsensusTerm {
                rho,
                cols: (0..6 * sc.robots).collect(),
                offsets,
            }),
            constraints,
            penalty: sc.config.solver.penalty,
        }
    }

    /// Robot `i` sub-block with the payload trajectory frozen.
    pub fn robot_ocp(&self, sc: &Scenario, i: usize, x0: &DVector<f64>, payload: &Trajectory, duals: &[Vector6<f64>], rho: f64) -> OcpDefinition {
        let n = self.horizon();
        let lay = sc.layout();
        let pose_list = poses(&payload.states, 0);
        let mut constraints: Vec<Arc<dyn StageConstraint>> = Vec::new();
        self.robot_constraints(sc, i, 0, 0, PoseSource::Fixed(pose_list.clone()), &mut constraints);
        let offsets = (0..n)
            .map(|k| DVector::from_fn(6, |a, _| payload.controls[k][6 * i + a] + duals[k][a]))
            .collect();
        OcpDefinition {
            dt: sc.dt(),
            x0: x0.clone(),
            dynamics: Arc::new(RobotDynamics::new(sc.robot.clone(), sc.n_feet, sc.handles[i], pose_list.to_vec())),
            x_ref: self.refs.robots[i].clone(),
            q: sc.config.weights.robot_q(sc.n_feet),
            r: sc.config.weights.robot_r(sc.n_feet),
            terminal_scale: sc.config.weights.terminal_scale,
            consensus: Some(ConsensusTerm {
                rho,
                cols: (lay.hand_force()..lay.hand_force() + 6).collect(),
                offsets,
            }),
            constraints,
            penalty: sc.config.solver.penalty,
        }
    }

    /// Undecomposed joint problem over `[x_0; x_1..x_R]` and `[u_1..u_R]`.
    pub fn centralized_ocp(&self, sc: &Scenario, x0: &DVector<f64>) -> OcpDefinition {
        let dynamics = StackedDynamics::new(sc.payload.clone(), vec![sc.robot.clone(); sc.robots], sc.n_feet);
        let mut constraints: Vec<Arc<dyn StageConstraint>> = Vec::new();
        self.payload_body_constraints(sc, &mut constraints);
        for i in 0..sc.robots {
            let (xo, uo) = (dynamics.robot_state_offset(i), dynamics.robot_control_offset(i));
            self.robot_constraints(sc, i, xo, uo, PoseSource::Live { offset: 0 }, &mut constraints);
        }
        let w = &sc.config.weights;
        let mut q = w.payload_q().as_slice().to_vec();
        let mut r = Vec::new();
        for _ in 0..sc.robots {
            q.extend(w.robot_q(sc.n_feet).iter());
            r.extend(w.robot_r(sc.n_feet).iter());
        }
        OcpDefinition {
            dt: sc.dt(),
            x0: x0.clone(),
            dynamics: Arc::new(dynamics),
            x_ref: (0..=self.horizon()).map(|k| self.refs.stacked(k)).collect(),
            q: DVector::from_vec(q),
            r: DVector::from_vec(r),
            terminal_scale: w.terminal_scale,
            consensus: None,
            constraints,
            penalty: sc.config.solver.penalty,
        }
    }
}

/// A window bound to the measured world state, as seen by the ADMM coordinator.
pub struct DistributedWindow<'a> {
    pub scenario: &'a Scenario,
    pub window: &'a Window,
    pub payload_x0: DVector<f64>,
    pub robot_x0: Vec<DVector<f64>>,
}

impl DistributedProblem for DistributedWindow<'_> {
    fn robots(&self) -> usize {
        self.scenario.robots
    }

    fn dt(&self) -> f64 {
        self.scenario.dt()
    }

    fn hand_offset(&self) -> usize {
        self.scenario.layout().hand_force()
    }

    fn payload_ocp(&self, robots: &[Trajectory], duals: &[Vec<Vector6<f64>>], rho: f64) -> OcpDefinition {
        self.window.payload_ocp(self.scenario, &self.payload_x0, robots, duals, rho)
    }

    fn robot_ocp(&self, i: usize, payload: &Trajectory, duals: &[Vector6<f64>], rho: f64) -> OcpDefinition {
        self.window.robot_ocp(self.scenario, i, &self.robot_x0[i], payload, duals, rho)
    }
}

/// Euler angles of a rigid-body block.
pub fn euler(x: &DVector<f64>, offset: usize) -> Vector3<f64> {
    Vector3::new(x[offset + EULER], x[offset + EULER + 1], x[offset + EULER + 2])
}
