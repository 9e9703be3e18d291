//! Tracking costs, the augmented-Lagrangian consensus penalty, and the local quadratic
//! model of one stage used by the Riccati solver.

use nalgebra::{DMatrix, DVector, Vector6};
use serde::{Deserialize, Serialize};

use crate::constraints::{relaxed_log_barrier, ConstraintKind, Residual};
use crate::model::{ControlLayout, RobotState, RIGID_BODY_DIM};

/// Diagonal weights of one rigid body's state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyWeights {
    pub position: f64,
    pub velocity: f64,
    pub orientation: f64,
    pub angular_momentum: f64,
}

impl Default for BodyWeights {
    fn default() -> Self {
        Self {
            position: 400.0,
            velocity: 10.0,
            orientation: 200.0,
            angular_momentum: 1.0,
        }
    }
}

impl BodyWeights {
    fn fill(&self, q: &mut [f64]) {
        for a in 0..3 {
            q[a] = self.position;
            q[3 + a] = self.velocity;
            q[6 + a] = self.orientation;
            q[9 + a] = self.angular_momentum;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    pub payload: BodyWeights,
    pub robot_base: BodyWeights,
    pub foot_position: f64,
    pub foot_force: f64,
    pub foot_velocity: f64,
    pub wrench: f64,
    pub wrench_copy: f64,
    pub terminal_scale: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            payload: BodyWeights::default(),
            robot_base: BodyWeights::default(),
            foot_position: 20.0,
            foot_force: 1e-3,
            foot_velocity: 1.0,
            wrench: 1e-3,
            wrench_copy: 1e-3,
            terminal_scale: 10.0,
        }
    }
}

impl CostWeights {
    pub fn payload_q(&self) -> DVector<f64> {
        let mut q = DVector::zeros(RIGID_BODY_DIM);
        self.payload.fill(q.as_mut_slice());
        q
    }

    pub fn payload_r(&self, robots: usize) -> DVector<f64> {
        DVector::from_element(6 * robots, self.wrench_copy)
    }

    pub fn robot_q(&self, n_feet: usize) -> DVector<f64> {
        let mut q = DVector::from_element(RobotState::dim(n_feet), self.foot_position);
        self.robot_base.fill(q.as_mut_slice());
        q
    }

    pub fn robot_r(&self, n_feet: usize) -> DVector<f64> {
        let lay = ControlLayout { n_feet };
        let mut r = DVector::from_element(lay.dim(), self.wrench);
        for j in 0..n_feet {
            for a in 0..3 {
                r[lay.force(j) + a] = self.foot_force;
                r[lay.foot_velocity(j) + a] = self.foot_velocity;
            }
        }
        r
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.payload.position,
            self.payload.velocity,
            self.payload.orientation,
            self.payload.angular_momentum,
            self.robot_base.position,
            self.robot_base.velocity,
            self.robot_base.orientation,
            self.robot_base.angular_momentum,
            self.foot_position,
            self.foot_force,
            self.foot_velocity,
            self.wrench,
            self.wrench_copy,
            self.terminal_scale,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err("all weights must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// `(x - x_ref)^T Q (x - x_ref) + u^T R u`; the control term is dropped when `u` is `None`.
pub fn stage_cost(
    x: &DVector<f64>,
    u: Option<&DVector<f64>>,
    x_ref: &DVector<f64>,
    q: &DVector<f64>,
    r: &DVector<f64>,
) -> f64 {
    let e = x - x_ref;
    let track: f64 = e.iter().zip(q.iter()).map(|(e, q)| q * e * e).sum();
    let reg: f64 = u
        .map(|u| u.iter().zip(r.iter()).map(|(u, r)| r * u * u).sum())
        .unwrap_or(0.0);
    track + reg
}

/// `A_i`: picks `(f_h, tau_h)` out of a robot control.
pub fn consensus_a(n_feet: usize) -> DMatrix<f64> {
    let lay = ControlLayout { n_feet };
    let mut a = DMatrix::zeros(6, lay.dim());
    for r in 0..6 {
        a[(r, lay.hand_force() + r)] = 1.0;
    }
    a
}

/// `B_i`: picks robot `i`'s copies out of the payload control.
pub fn consensus_b(robot: usize, robots: usize) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(6, 6 * robots);
    for r in 0..6 {
        b[(r, 6 * robot + r)] = 1.0;
    }
    b
}

/// Newton-pair mismatch `A_i u_i + B_i u_0` at one knot.
pub fn pair_mismatch(robot_u: &DVector<f64>, payload_u: &DVector<f64>, robot: usize, n_feet: usize) -> Vector6<f64> {
    let o = ControlLayout { n_feet }.hand_force();
    Vector6::from_fn(|r, _| robot_u[o + r] + payload_u[6 * robot + r])
}

/// `sum_k rho/2 |A_i u_i[k] + B_i u_0[k] + w_i[k]|^2` for one robot.
pub fn consensus_penalty(
    robot_controls: &[DVector<f64>],
    payload_controls: &[DVector<f64>],
    robot: usize,
    duals: &[Vector6<f64>],
    rho: f64,
    n_feet: usize,
) -> f64 {
    robot_controls
        .iter()
        .zip(payload_controls)
        .zip(duals)
        .map(|((ui, u0), w)| 0.5 * rho * (pair_mismatch(ui, u0, robot, n_feet) + w).norm_squared())
        .sum()
}

/// Payload-side penalty: the robot-side terms summed over the team.
pub fn payload_consensus_penalty(
    robot_controls: &[Vec<DVector<f64>>],
    payload_controls: &[DVector<f64>],
    duals: &[Vec<Vector6<f64>>],
    rho: f64,
    n_feet: usize,
) -> f64 {
    (0..robot_controls.len())
        .map(|i| consensus_penalty(&robot_controls[i], payload_controls, i, &duals[i], rho, n_feet))
        .sum()
}

/// `rho/2 |u[cols] + offset_k|^2` with the counterpart and dual folded into `offset_k`.
#[derive(Debug, Clone)]
pub struct ConsensusTerm {
    pub rho: f64,
    pub cols: Vec<usize>,
    pub offsets: Vec<DVector<f64>>,
}

impl ConsensusTerm {
    fn mismatch(&self, k: usize, u: &DVector<f64>) -> DVector<f64> {
        let off = &self.offsets[k];
        DVector::from_fn(self.cols.len(), |r, _| u[self.cols[r]] + off[r])
    }

    pub fn value(&self, k: usize, u: &DVector<f64>) -> f64 {
        0.5 * self.rho * self.mismatch(k, u).norm_squared()
    }
}

/// Barrier and equality-penalty parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltySettings {
    pub barrier_mu: f64,
    pub barrier_delta: f64,
    pub equality_weight: f64,
}

impl Default for PenaltySettings {
    fn default() -> Self {
        Self {
            barrier_mu: 1e-2,
            barrier_delta: 1e-3,
            equality_weight: 1e4,
        }
    }
}

/// Stage cost split by origin.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub tracking: f64,
    pub consensus: f64,
    pub barrier: f64,
    pub equality: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.tracking + self.consensus + self.barrier + self.equality
    }

    pub fn add(&mut self, o: &CostBreakdown) {
        self.tracking += o.tracking;
        self.consensus += o.consensus;
        self.barrier += o.barrier;
        self.equality += o.equality;
    }
}

/// Second-order model of one stage over `z = [x; u]`.
#[derive(Debug, Clone)]
pub struct StageQuadratic {
    pub cost: CostBreakdown,
    pub lx: DVector<f64>,
    pub lu: DVector<f64>,
    pub lxx: DMatrix<f64>,
    pub luu: DMatrix<f64>,
    /// `d^2 l / du dx`, `m x n`.
    pub lux: DMatrix<f64>,
}

/// Inputs of one stage of the augmented-Lagrangian cost.
pub struct StageTerms<'a> {
    pub x: &'a DVector<f64>,
    pub u: Option<&'a DVector<f64>>,
    pub x_ref: &'a DVector<f64>,
    pub q: &'a DVector<f64>,
    pub r: &'a DVector<f64>,
    pub consensus: Option<(&'a ConsensusTerm, usize)>,
    pub residuals: &'a [Residual],
    pub penalty: &'a PenaltySettings,
}

/// Per-row weight and slope of the penalized residual: `(value, d/dr, d2/dr2)`.
fn residual_penalty(kind: ConstraintKind, v: f64, p: &PenaltySettings) -> (f64, f64, f64) {
    match kind {
        ConstraintKind::Equality => (0.5 * p.equality_weight * v * v, p.equality_weight * v, p.equality_weight),
        ConstraintKind::Inequality => {
            let (b, db, ddb) = relaxed_log_barrier(-v, p.barrier_delta, p.barrier_mu);
            (b, -db, ddb)
        }
    }
}

/// Stage cost without derivatives.
pub fn stage_value(t: &StageTerms<'_>) -> CostBreakdown {
    let mut c = CostBreakdown {
        tracking: stage_cost(t.x, t.u, t.x_ref, t.q, t.r),
        ..Default::default()
    };
    if let (Some((term, k)), Some(u)) = (t.consensus, t.u) {
        c.consensus = term.value(k, u);
    }
    for res in t.residuals {
        for v in &res.values {
            let (val, _, _) = residual_penalty(res.kind, *v, t.penalty);
            match res.kind {
                ConstraintKind::Equality => c.equality += val,
                ConstraintKind::Inequality => c.barrier += val,
            }
        }
    }
    c
}

/// Exact gradient and Gauss-Newton Hessian of the stage cost.
///
/// `next_sensitivity = (A, B)` maps a perturbation of `(x, u)` to the next state and is
/// required by residuals that read the next knot.
pub fn quadraticize_stage(t: &StageTerms<'_>, next_sensitivity: Option<(&DMatrix<f64>, &DMatrix<f64>)>) -> StageQuadratic {
    let n = t.x.len();
    let m = t.u.map_or(0, |u| u.len());
    let nz = n + m;
    let mut g = DVector::zeros(nz);
    let mut h = DMatrix::zeros(nz, nz);
    let cost = stage_value(t);

    let e = t.x - t.x_ref;
    for i in 0..n {
        g[i] += 2.0 * t.q[i] * e[i];
        h[(i, i)] += 2.0 * t.q[i];
    }
    if let Some(u) = t.u {
        for i in 0..m {
            g[n + i] += 2.0 * t.r[i] * u[i];
            h[(n + i, n + i)] += 2.0 * t.r[i];
        }
        if let Some((term, k)) = t.consensus {
            let s = term.mismatch(k, u);
            for (a, ca) in term.cols.iter().enumerate() {
                g[n + ca] += term.rho * s[a];
                h[(n + ca, n + ca)] += term.rho;
            }
        }
    }

    for res in t.residuals {
        if let Some((next_cols, jn)) = &res.next {
            let (a, b) = next_sensitivity.expect("residual reads the next knot but no sensitivity was given");
            let rows = res.values.len();
            let mut full = DMatrix::zeros(rows, nz);
            for (c, col) in res.cols.iter().enumerate() {
                for r in 0..rows {
                    full[(r, *col)] += res.jac[(r, c)];
                }
            }
            for (c, sc) in next_cols.iter().enumerate() {
                for r in 0..rows {
                    let w = jn[(r, c)];
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        full[(r, j)] += w * a[(*sc, j)];
                    }
                    for j in 0..m {
                        full[(r, n + j)] += w * b[(*sc, j)];
                    }
                }
            }
            for (r, v) in res.values.iter().enumerate() {
                let (_, d1, d2) = residual_penalty(res.kind, *v, t.penalty);
                let row = full.row(r);
                g += row.transpose() * d1;
                h.ger(d2, &row.transpose(), &row.transpose(), 1.0);
            }
        } else {
            let k = res.cols.len();
            for (r, v) in res.values.iter().enumerate() {
                let (_, d1, d2) = residual_penalty(res.kind, *v, t.penalty);
                for a in 0..k {
                    let ja = res.jac[(r, a)];
                    if ja == 0.0 {
                        continue;
                    }
                    let ca = res.cols[a];
                    g[ca] += d1 * ja;
                    for b in 0..k {
                        h[(ca, res.cols[b])] += d2 * ja * res.jac[(r, b)];
                    }
                }
            }
        }
    }

    StageQuadratic {
        cost,
        lx: g.rows(0, n).into_owned(),
        lu: g.rows(n, m).into_owned(),
        lxx: h.view((0, 0), (n, n)).into_owned(),
        luu: h.view((n, n), (m, m)).into_owned(),
        lux: h.view((n, 0), (m, n)).into_owned(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_cost_examples() {
        let x = DVector::from_element(12, 0.3);
        let q = DVector::from_element(12, 1.0);
        let r = DVector::zeros(0);
        assert_eq!(stage_cost(&x, None, &x, &q, &r), 0.0);
        let mut off = x.clone();
        off[0] += 0.5;
        assert!((stage_cost(&off, None, &x, &q, &r) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn consensus_examples() {
        let n_feet = 4;
        let lay = ControlLayout { n_feet };
        let mut ui = DVector::zeros(lay.dim());
        let mut u0 = DVector::zeros(6);
        for a in 0..6 {
            ui[lay.hand_force() + a] = 1.0 + a as f64;
            u0[a] = -(1.0 + a as f64);
        }
        let w = [Vector6::zeros()];
        assert_eq!(consensus_penalty(&[ui.clone()], &[u0.clone()], 0, &w, 10.0, n_feet), 0.0);
        u0[0] += 1.0;
        assert!((consensus_penalty(&[ui.clone()], &[u0.clone()], 0, &w, 2.0, n_feet) - 1.0).abs() < 1e-15);
        let a = consensus_a(n_feet);
        let b = consensus_b(0, 1);
        let s = &a * &ui + &b * &u0;
        assert!((s - pair_mismatch(&ui, &u0, 0, n_feet)).norm() < 1e-15);
    }
}
