//! Constraint terms bound to concrete positions inside a subsystem's stacked state
//! and control, so the same evaluators serve robot, payload and centralized problems.

use std::sync::Arc;

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector2, Vector3};

use super::primitives::{friction_cone, grasp_normal, grasp_normal_jacobian, obstacle_distance, WrenchBox};
use super::terrain::{ConvexRegion, Obstacle, Terrain};
use crate::model::rotation::{rotation, rotation_partials};
use crate::model::{foot_offset, ControlLayout, Pose, EULER, POS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConstraintKind {
    Equality,
    Inequality,
}

/// Residual block with a Jacobian over a subset of the stage variables `z = [x; u]`.
#[derive(Debug, Clone)]
pub struct Residual {
    pub kind: ConstraintKind,
    pub label: &'static str,
    pub values: Vec<f64>,
    /// Columns of `z` that `jac` refers to (`< state_dim` for states, `state_dim + j` for controls).
    pub cols: Vec<usize>,
    pub jac: DMatrix<f64>,
    /// Dependence on the next state, as `(state columns, jacobian)`.
    pub next: Option<(Vec<usize>, DMatrix<f64>)>,
}

/// Everything a constraint may read at one stage.
#[derive(Debug, Clone, Copy)]
pub struct StageContext<'a> {
    pub knot: usize,
    pub x: &'a [f64],
    pub u: Option<&'a [f64]>,
    pub next: Option<&'a [f64]>,
    pub state_dim: usize,
    pub jacobian: bool,
}

pub trait StageConstraint: Send + Sync {
    fn evaluate(&self, ctx: &StageContext<'_>, out: &mut Vec<Residual>);
}

fn v3(s: &[f64], o: usize) -> Vector3<f64> {
    Vector3::new(s[o], s[o + 1], s[o + 2])
}

/// Column-merging Jacobian accumulator.
struct JacBuilder {
    rows: usize,
    cols: Vec<usize>,
    data: Vec<f64>,
}

impl JacBuilder {
    fn new(rows: usize) -> Self {
        Self {
            rows,
            cols: Vec::new(),
            data: Vec::new(),
        }
    }

    fn column(&mut self, col: usize) -> usize {
        if let Some(i) = self.cols.iter().position(|c| *c == col) {
            return i;
        }
        self.cols.push(col);
        self.data.extend(std::iter::repeat_n(0.0, self.rows));
        self.cols.len() - 1
    }

    fn add(&mut self, row: usize, col: usize, v: f64) {
        let c = self.column(col);
        self.data[c * self.rows + row] += v;
    }

    fn add_block<const R: usize>(&mut self, row: usize, col: usize, b: &SMatrix<f64, R, 3>) {
        for j in 0..3 {
            let c = self.column(col + j);
            for i in 0..R {
                self.data[c * self.rows + row + i] += b[(i, j)];
            }
        }
    }

    /// Adds `b` to the upper box rows and `-b` to the lower rows.
    fn add_box(&mut self, col: usize, b: &Matrix3<f64>) {
        self.add_block(0, col, b);
        self.add_block(3, col, &(-b));
    }

    fn finish(self) -> (Vec<usize>, DMatrix<f64>) {
        let n = self.cols.len();
        (self.cols, DMatrix::from_vec(self.rows, n, self.data))
    }
}

fn residual(kind: ConstraintKind, label: &'static str, values: Vec<f64>, jac: Option<JacBuilder>) -> Residual {
    let (cols, jac) = match jac {
        Some(j) => j.finish(),
        None => (Vec::new(), DMatrix::zeros(values.len(), 0)),
    };
    Residual {
        kind,
        label,
        values,
        cols,
        jac,
        next: None,
    }
}

fn box_values(d: &Vector3<f64>, hw: &Vector3<f64>) -> Vec<f64> {
    super::primitives::box_residuals(d, hw).to_vec()
}

/// Pose of another body: read from the live state or frozen per knot.
#[derive(Debug, Clone)]
pub enum PoseSource {
    Live { offset: usize },
    Fixed(Arc<Vec<Pose>>),
}

impl PoseSource {
    fn pose(&self, ctx: &StageContext<'_>) -> Pose {
        match self {
            PoseSource::Live { offset } => Pose {
                position: v3(ctx.x, offset + POS),
                euler: v3(ctx.x, offset + EULER),
            },
            PoseSource::Fixed(p) => p[ctx.knot.min(p.len() - 1)],
        }
    }

    fn live(&self) -> Option<usize> {
        match self {
            PoseSource::Live { offset } => Some(*offset),
            PoseSource::Fixed(_) => None,
        }
    }
}

fn transpose_partials(theta: &Vector3<f64>, v: &Vector3<f64>) -> Matrix3<f64> {
    let dr = rotation_partials(theta);
    Matrix3::from_columns(&[dr[0].transpose() * v, dr[1].transpose() * v, dr[2].transpose() * v])
}

/// Per-foot contact, friction, foothold and kinematic-box terms of one robot.
#[derive(Debug, Clone)]
pub struct FootConstraint {
    pub state_offset: usize,
    pub control_offset: usize,
    pub foot: usize,
    pub n_feet: usize,
    pub contact: Arc<Vec<bool>>,
    pub regions: Vec<Option<Arc<ConvexRegion>>>,
    pub terrain: Arc<Terrain>,
    pub nominal_offset: Vector3<f64>,
    pub half_widths: Vector3<f64>,
}

impl FootConstraint {
    fn in_contact(&self, knot: usize) -> bool {
        self.contact[knot.min(self.contact.len() - 1)]
    }
}

impl StageConstraint for FootConstraint {
    fn evaluate(&self, ctx: &StageContext<'_>, out: &mut Vec<Residual>) {
        let xo = self.state_offset;
        let po = xo + foot_offset(self.foot);
        let p = v3(ctx.x, po);
        let r = v3(ctx.x, xo + POS);
        let theta = v3(ctx.x, xo + EULER);
        let rot_t = rotation(&theta).transpose();
        let d = rot_t * (p - r) - self.nominal_offset;
        let jac = ctx.jacobian.then(|| {
            let mut j = JacBuilder::new(6);
            j.add_box(po, &rot_t);
            j.add_box(xo + POS, &(-rot_t));
            j.add_box(xo + EULER, &transpose_partials(&theta, &(p - r)));
            j
        });
        out.push(residual(
            ConstraintKind::Inequality,
            "foot_kinematics",
            box_values(&d, &self.half_widths),
            jac,
        ));

        let stance = self.in_contact(ctx.knot);
        if stance {
            let g = self.terrain.gradient(p[0], p[1]);
            let jac = ctx.jacobian.then(|| {
                let mut j = JacBuilder::new(1);
                j.add(0, po, -g[0]);
                j.add(0, po + 1, -g[1]);
                j.add(0, po + 2, 1.0);
                j
            });
            out.push(residual(
                ConstraintKind::Equality,
                "foot_height",
                vec![p[2] - self.terrain.height(p[0], p[1])],
                jac,
            ));
            if let Some(Some(region)) = self.regions.get(ctx.knot.min(self.regions.len().saturating_sub(1))) {
                let planes = region.half_planes();
                let xy = Vector2::new(p[0], p[1]);
                let values = planes.iter().map(|(a, b)| a.dot(&xy) - b).collect();
                let jac = ctx.jacobian.then(|| {
                    let mut j = JacBuilder::new(planes.len());
                    for (q, (a, _)) in planes.iter().enumerate() {
                        j.add(q, po, a[0]);
                        j.add(q, po + 1, a[1]);
                    }
                    j
                });
                out.push(residual(ConstraintKind::Inequality, "foot_region", values, jac));
            }
        }

        let Some(u) = ctx.u else { return };
        let lay = ControlLayout { n_feet: self.n_feet };
        let uo = ctx.state_dim + self.control_offset;
        let (pinned_col, label) = if stance {
            (uo + lay.foot_velocity(self.foot), "stance_velocity")
        } else {
            (uo + lay.force(self.foot), "swing_force")
        };
        let local = pinned_col - ctx.state_dim - self.control_offset;
        let jac = ctx.jacobian.then(|| {
            let mut j = JacBuilder::new(3);
            j.add_block(0, pinned_col, &Matrix3::identity());
            j
        });
        let o = self.control_offset + local;
        out.push(residual(ConstraintKind::Equality, label, u[o..o + 3].to_vec(), jac));

        if stance {
            let fo = self.control_offset + lay.force(self.foot);
            let f = v3(u, fo);
            let n = self.terrain.normal(p[0], p[1]);
            let cone = friction_cone(&f, &n, self.terrain.mu);
            let jac = ctx.jacobian.then(|| {
                let mut j = JacBuilder::new(2);
                j.add_block(0, ctx.state_dim + fo, &cone.d_force);
                j
            });
            out.push(residual(ConstraintKind::Inequality, "foot_friction", cone.values.to_vec(), jac));
        }
    }
}

/// Manipulation friction cone and torque box.
///
/// The payload-side reaction is `force_sign * u[force]` and the robot-side torque is
/// `torque_sign * u[torque]`, so the same term covers `(f_h, tau_h)` on a robot
/// (`-1, +1`) and the copies `(f_bar, tau_bar)` on the payload (`+1, -1`).
#[derive(Debug, Clone)]
pub struct HandConstraint {
    pub force_offset: usize,
    pub torque_offset: usize,
    pub force_sign: f64,
    pub torque_sign: f64,
    pub payload: PoseSource,
    pub mu: f64,
    pub bounds: WrenchBox,
}

impl StageConstraint for HandConstraint {
    fn evaluate(&self, ctx: &StageContext<'_>, out: &mut Vec<Residual>) {
        let Some(u) = ctx.u else { return };
        let pose = self.payload.pose(ctx);
        let n = grasp_normal(&pose.euler);
        let reaction = v3(u, self.force_offset) * self.force_sign;
        let cone = friction_cone(&reaction, &n, self.mu);
        let jac = ctx.jacobian.then(|| {
            let mut j = JacBuilder::new(2);
            j.add_block(0, ctx.state_dim + self.force_offset, &(cone.d_force * self.force_sign));
            if let Some(po) = self.payload.live() {
                j.add_block(0, po + EULER, &(cone.d_normal * grasp_normal_jacobian(&pose.euler)));
            }
            j
        });
        out.push(residual(ConstraintKind::Inequality, "hand_friction", cone.values.to_vec(), jac));

        let tau = v3(u, self.torque_offset) * self.torque_sign;
        let mut values = Vec::with_capacity(6);
        for a in 0..3 {
            values.push(self.bounds.tau_min[a] - tau[a]);
        }
        for a in 0..3 {
            values.push(tau[a] - self.bounds.tau_max[a]);
        }
        let jac = ctx.jacobian.then(|| {
            let mut j = JacBuilder::new(6);
            j.add_box(ctx.state_dim + self.torque_offset, &(-Matrix3::identity() * self.torque_sign));
            j
        });
        out.push(residual(ConstraintKind::Inequality, "hand_torque_box", values, jac));
    }
}

/// Grasp point inside a box around the nominal arm workspace of the robot.
#[derive(Debug, Clone)]
pub struct ArmConstraint {
    pub robot: PoseSource,
    pub payload: PoseSource,
    pub handle_offset: Vector3<f64>,
    pub nominal_arm_offset: Vector3<f64>,
    pub p_h_max: Vector3<f64>,
}

impl StageConstraint for ArmConstraint {
    fn evaluate(&self, ctx: &StageContext<'_>, out: &mut Vec<Residual>) {
        let rp = self.robot.pose(ctx);
        let pp = self.payload.pose(ctx);
        let rot0 = rotation(&pp.euler);
        let rot_it = rotation(&rp.euler).transpose();
        let v = pp.position + rot0 * self.handle_offset - rp.position;
        let d = rot_it * v - self.nominal_arm_offset;
        let jac = ctx.jacobian.then(|| {
            let mut j = JacBuilder::new(6);
            if let Some(o) = self.payload.live() {
                j.add_box(o + POS, &rot_it);
                let dr = rotation_partials(&pp.euler);
                let m = Matrix3::from_columns(&[
                    rot_it * dr[0] * self.handle_offset,
                    rot_it * dr[1] * self.handle_offset,
                    rot_it * dr[2] * self.handle_offset,
                ]);
                j.add_box(o + EULER, &m);
            }
            if let Some(o) = self.robot.live() {
                j.add_box(o + POS, &(-rot_it));
                j.add_box(o + EULER, &transpose_partials(&rp.euler, &v));
            }
            j
        });
        out.push(residual(
            ConstraintKind::Inequality,
            "arm_kinematics",
            box_values(&d, &self.p_h_max),
            jac,
        ));
    }
}

/// Robot base near its nominal offset from the payload, in the payload frame.
#[derive(Debug, Clone)]
pub struct FormationConstraint {
    pub robot: PoseSource,
    pub payload: PoseSource,
    pub nominal_offset: Vector3<f64>,
    pub bound: Vector3<f64>,
}

impl StageConstraint for FormationConstraint {
    fn evaluate(&self, ctx: &StageContext<'_>, out: &mut Vec<Residual>) {
        let rp = self.robot.pose(ctx);
        let pp = self.payload.pose(ctx);
        let rot0_t = rotation(&pp.euler).transpose();
        let v = rp.position - pp.position;
        let d = rot0_t * v - self.nominal_offset;
        let jac = ctx.jacobian.then(|| {
            let mut j = JacBuilder::new(6);
            if let Some(o) = self.robot.live() {
                j.add_box(o + POS, &rot0_t);
            }
            if let Some(o) = self.payload.live() {
                j.add_box(o + POS, &(-rot0_t));
                j.add_box(o + EULER, &transpose_partials(&pp.euler, &v));
            }
            j
        });
        out.push(residual(ConstraintKind::Inequality, "formation", box_values(&d, &self.bound), jac));
    }
}

/// Discrete-time barrier condition between consecutive knots for one body and obstacle.
#[derive(Debug, Clone)]
pub struct CbfConstraint {
    pub state_offset: usize,
    pub obstacle: Obstacle,
    pub gamma: f64,
    pub r_body: f64,
}

impl StageConstraint for CbfConstraint {
    fn evaluate(&self, ctx: &StageContext<'_>, out: &mut Vec<Residual>) {
        let Some(next) = ctx.next else { return };
        let o = self.state_offset + POS;
        let p = Vector2::new(ctx.x[o], ctx.x[o + 1]);
        let pn = Vector2::new(next[o], next[o + 1]);
        let c = Vector2::from(self.obstacle.center);
        let value = (1.0 - self.gamma) * obstacle_distance(&p, &self.obstacle, self.r_body)
            - obstacle_distance(&pn, &self.obstacle, self.r_body);
        let jac = ctx.jacobian.then(|| {
            let mut j = JacBuilder::new(1);
            let g = (p - c) * (2.0 * (1.0 - self.gamma));
            j.add(0, o, g[0]);
            j.add(0, o + 1, g[1]);
            j
        });
        let mut res = residual(ConstraintKind::Inequality, "cbf", vec![value], jac);
        if ctx.jacobian {
            let g = (pn - c) * -2.0;
            res.next = Some((vec![o, o + 1], DMatrix::from_row_slice(1, 2, &[g[0], g[1]])));
        }
        out.push(res);
    }
}

/// Minimum payload height above the terrain.
#[derive(Debug, Clone)]
pub struct ClearanceConstraint {
    pub state_offset: usize,
    pub terrain: Arc<Terrain>,
    pub clearance: f64,
}

impl StageConstraint for ClearanceConstraint {
    fn evaluate(&self, ctx: &StageContext<'_>, out: &mut Vec<Residual>) {
        let o = self.state_offset + POS;
        let p = v3(ctx.x, o);
        let g = self.terrain.gradient(p[0], p[1]);
        let value = self.clearance - (p[2] - self.terrain.height(p[0], p[1]));
        let jac = ctx.jacobian.then(|| {
            let mut j = JacBuilder::new(1);
            j.add(0, o, g[0]);
            j.add(0, o + 1, g[1]);
            j.add(0, o + 2, -1.0);
            j
        });
        out.push(residual(ConstraintKind::Inequality, "clearance", vec![value], jac));
    }
}
