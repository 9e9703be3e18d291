//! Riccati-based SQP for one optimal control problem.
//!
//! Each iteration linearizes the implicit dynamics along the current (defect-free)
//! trajectory, builds a quadratic model of the penalized cost, solves it with a
//! time-varying Riccati recursion and globalizes the closed-loop rollout with an
//! Armijo backtracking line search.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{ConstraintKind, Residual, StageConstraint, StageContext};
use crate::cost::{quadraticize_stage, stage_value, ConsensusTerm, CostBreakdown, PenaltySettings, StageTerms};
use crate::model::{linearize_at, step_backward_euler, Dynamics, ModelError};

pub const REG_INITIAL: f64 = 1e-8;
pub const REG_MAX: f64 = 1e6;

#[derive(Debug, Error)]
pub enum SqpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite cost at the initial guess")]
    NonFiniteInit,
    #[error("hessian regularization exceeded {REG_MAX:e} at knot {knot}")]
    Regularization { knot: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// States `x[0..=N]` and controls `u[0..N]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }
}

/// Optimal control problem over `N` backward-Euler steps.
#[derive(Clone)]
pub struct OcpDefinition {
    pub dt: f64,
    pub x0: DVector<f64>,
    pub dynamics: Arc<dyn Dynamics>,
    /// `N + 1` state references.
    pub x_ref: Vec<DVector<f64>>,
    pub q: DVector<f64>,
    pub r: DVector<f64>,
    pub terminal_scale: f64,
    pub consensus: Option<ConsensusTerm>,
    pub constraints: Vec<Arc<dyn StageConstraint>>,
    pub penalty: PenaltySettings,
}

impl OcpDefinition {
    pub fn horizon(&self) -> usize {
        self.x_ref.len() - 1
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.dynamics.control_dim()
    }

    fn validate(&self) -> Result<(), SqpError> {
        let (n, m) = (self.state_dim(), self.control_dim());
        let bad = |what: &str| Err(SqpError::Dimension(what.to_string()));
        if self.x_ref.len() < 2 {
            return bad("horizon must have at least one step");
        }
        if self.x0.len() != n || self.q.len() != n || self.x_ref.iter().any(|x| x.len() != n) {
            return bad("state dimension");
        }
        if self.r.len() != m {
            return bad("control weight dimension");
        }
        if let Some(c) = &self.consensus {
            if c.offsets.len() < self.horizon() || c.cols.iter().any(|col| *col >= m) {
                return bad("consensus term");
            }
        }
        Ok(())
    }

    /// Every constraint residual at knot `k`; `u` and `next` are absent on the terminal knot.
    pub fn residuals(&self, k: usize, x: &DVector<f64>, u: Option<&DVector<f64>>, next: Option<&DVector<f64>>, jacobian: bool) -> Vec<Residual> {
        let ctx = StageContext {
            knot: k,
            x: x.as_slice(),
            u: u.map(|u| u.as_slice()),
            next: next.map(|x| x.as_slice()),
            state_dim: self.state_dim(),
            jacobian,
        };
        let mut out = Vec::new();
        for c in &self.constraints {
            c.evaluate(&ctx, &mut out);
        }
        out
    }

    /// Cost inputs of knot `k` of `traj`, with `q` as the state weight.
    pub fn stage_terms<'a>(&'a self, k: usize, traj: &'a Trajectory, residuals: &'a [Residual], q: &'a DVector<f64>) -> StageTerms<'a> {
        let n = self.horizon();
        StageTerms {
            x: &traj.states[k],
            u: (k < n).then(|| &traj.controls[k]),
            x_ref: &self.x_ref[k],
            q,
            r: &self.r,
            consensus: if k < n { self.consensus.as_ref().map(|c| (c, k)) } else { None },
            residuals,
            penalty: &self.penalty,
        }
    }

    /// Total penalized cost split by origin.
    pub fn evaluate(&self, traj: &Trajectory) -> CostBreakdown {
        let n = self.horizon();
        let q_term = &self.q * self.terminal_scale;
        let mut total = CostBreakdown::default();
        for k in 0..=n {
            let u = (k < n).then(|| &traj.controls[k]);
            let next = (k < n).then(|| &traj.states[k + 1]);
            let res = self.residuals(k, &traj.states[k], u, next, false);
            let q = if k == n { &q_term } else { &self.q };
            total.add(&stage_value(&self.stage_terms(k, traj, &res, q)));
        }
        total
    }

    /// Largest absolute equality residual along the trajectory.
    pub fn max_equality_violation(&self, traj: &Trajectory) -> f64 {
        self.constraint_extremes(traj).0
    }

    /// `(max |equality|, max inequality)` along the trajectory.
    pub fn constraint_extremes(&self, traj: &Trajectory) -> (f64, f64) {
        let n = self.horizon();
        let (mut eq, mut ineq) = (0.0f64, f64::NEG_INFINITY);
        for k in 0..=n {
            let u = (k < n).then(|| &traj.controls[k]);
            let next = (k < n).then(|| &traj.states[k + 1]);
            for r in self.residuals(k, &traj.states[k], u, next, false) {
                for v in &r.values {
                    match r.kind {
                        ConstraintKind::Equality => eq = eq.max(v.abs()),
                        ConstraintKind::Inequality => ineq = ineq.max(*v),
                    }
                }
            }
        }
        (eq, ineq)
    }

    /// Worst residual per constraint label: `|g|` for equalities, `h` for inequalities.
    pub fn constraint_report(&self, traj: &Trajectory) -> BTreeMap<&'static str, f64> {
        let mut out = BTreeMap::new();
        for k in 0..=self.horizon() {
            for (label, v) in self.knot_report(traj, k) {
                let slot = out.entry(label).or_insert(f64::NEG_INFINITY);
                *slot = slot.max(v);
            }
        }
        out
    }

    /// Worst residual per constraint label at knot `k`.
    pub fn knot_report(&self, traj: &Trajectory, k: usize) -> BTreeMap<&'static str, f64> {
        let n = self.horizon();
        let mut out = BTreeMap::new();
        let u = (k < n).then(|| &traj.controls[k]);
        let next = (k < n).then(|| &traj.states[k + 1]);
        for r in self.residuals(k, &traj.states[k], u, next, false) {
            let worst = r.values.iter().map(|v| match r.kind {
                ConstraintKind::Equality => v.abs(),
                ConstraintKind::Inequality => *v,
            });
            let slot = out.entry(r.label).or_insert(f64::NEG_INFINITY);
            *slot = worst.fold(*slot, f64::max);
        }
        out
    }

    /// Max-norm of `x[k+1] - x[k] - dt f(x[k+1], u[k])` over the horizon.
    pub fn max_defect(&self, traj: &Trajectory) -> f64 {
        let mut worst = (&traj.states[0] - &self.x0).amax();
        for k in 0..traj.horizon() {
            let (x, xn, u) = (&traj.states[k], &traj.states[k + 1], &traj.controls[k]);
            let d = match self.dynamics.derivative(k + 1, xn, u) {
                Ok(f) => (xn - x - f * self.dt).amax(),
                Err(_) => f64::INFINITY,
            };
            worst = worst.max(d);
        }
        worst
    }

    /// Open-loop rollout of `controls` from `x0`.
    pub fn rollout(&self, controls: &[DVector<f64>]) -> Result<Trajectory, SqpError> {
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(self.x0.clone());
        for (k, u) in controls.iter().enumerate() {
            let next = step_backward_euler(self.dynamics.as_ref(), k + 1, &states[k], u, self.dt)?;
            states.push(next);
        }
        Ok(Trajectory {
            states,
            controls: controls.to_vec(),
        })
    }
}

/// Iteration budget and globalization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SqpSettings {
    pub max_iters: usize,
    pub backtrack_ratio: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Stop when the predicted decrease falls below this value.
    pub tolerance: f64,
    /// Close the remaining defects with a feedback rollout through the implicit dynamics.
    pub project: bool,
}

impl Default for SqpSettings {
    fn default() -> Self {
        Self {
            max_iters: 1,
            backtrack_ratio: 0.5,
            armijo: 1e-4,
            max_backtracks: 10,
            tolerance: 1e-10,
            project: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub trajectory: Trajectory,
    pub iterations: usize,
    pub initial_merit: f64,
    pub merit: f64,
    pub cost: CostBreakdown,
    pub max_defect: f64,
    pub max_equality_violation: f64,
    pub step_sizes: Vec<f64>,
    /// Merit before and after each iteration, both under that iteration's defect weight.
    pub merit_steps: Vec<(f64, f64)>,
    /// Whether the final feedback rollout replaced the last iterate.
    pub projected: bool,
    /// Seconds.
    pub wall_time: f64,
}

/// Local LQ model of one stage: dynamics `dx' = A dx + B du + d` and cost derivatives.
#[derive(Debug, Clone)]
pub struct LqStage {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Defect closure of the linearization point (zero on a consistent trajectory).
    pub d: DVector<f64>,
    pub lx: DVector<f64>,
    pub lu: DVector<f64>,
    pub lxx: DMatrix<f64>,
    pub luu: DMatrix<f64>,
    pub lux: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct BackwardPass {
    /// Feedback `K_k` (`m x n`).
    pub feedback: Vec<DMatrix<f64>>,
    /// Feedforward `k_k`.
    pub feedforward: Vec<DVector<f64>>,
    /// Predicted change `alpha * d1 + alpha^2 * d2`.
    pub d1: f64,
    pub d2: f64,
    /// Regularization applied at each knot.
    pub regularization: Vec<f64>,
    /// Largest costate magnitude `|V_x|` seen by the recursion.
    pub max_costate: f64,
}

impl BackwardPass {
    pub fn predicted(&self, alpha: f64) -> f64 {
        alpha * self.d1 + alpha * alpha * self.d2
    }
}

/// Smallest `lambda` in `{0, 1e-8, 1e-7, ...}` making `H + lambda I` Cholesky-factorizable.
pub fn regularize_hessian(h: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64), SqpError> {
    let mut lambda = 0.0;
    loop {
        let mut reg = h.clone();
        for i in 0..reg.nrows() {
            reg[(i, i)] += lambda;
        }
        if reg.clone().cholesky().is_some() {
            return Ok((reg, lambda));
        }
        lambda = if lambda == 0.0 { REG_INITIAL } else { lambda * 10.0 };
        if lambda > REG_MAX * (1.0 + 1e-12) {
            return Err(SqpError::Regularization { knot: usize::MAX });
        }
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Time-varying Riccati recursion; `terminal = (V_x, V_xx)` at knot `N`.
pub fn riccati_backward_pass(stages: &[LqStage], terminal: (&DVector<f64>, &DMatrix<f64>)) -> Result<BackwardPass, SqpError> {
    let n_stages = stages.len();
    let mut vx = terminal.0.clone();
    let mut vxx = terminal.1.clone();
    let mut feedback = vec![DMatrix::zeros(0, 0); n_stages];
    let mut feedforward = vec![DVector::zeros(0); n_stages];
    let mut regularization = vec![0.0; n_stages];
    let (mut d1, mut d2) = (0.0, 0.0);
    let mut max_costate = 0.0f64;
    for k in (0..n_stages).rev() {
        let s = &stages[k];
        let bt_vxx = s.b.transpose() * &vxx;
        let vx_next = &vx + &vxx * &s.d;
        max_costate = max_costate.max(vx_next.amax());
        let qx = &s.lx + s.a.transpose() * &vx_next;
        let qu = &s.lu + s.b.transpose() * &vx_next;
        let qxx = &s.lxx + s.a.transpose() * &vxx * &s.a;
        let mut quu = &s.luu + &bt_vxx * &s.b;
        symmetrize(&mut quu);
        let qux = &s.lux + &bt_vxx * &s.a;
        let (quu_reg, lambda) = regularize_hessian(&quu).map_err(|_| SqpError::Regularization { knot: k })?;
        let chol = quu_reg.cholesky().expect("factorization succeeded during regularization");
        let kff = -chol.solve(&qu);
        let kfb = -chol.solve(&qux);
        d1 += kff.dot(&qu);
        d2 += 0.5 * kff.dot(&(&quu * &kff));
        let kt = kfb.transpose();
        vx = &qx + &kt * &quu * &kff + &kt * &qu + qux.transpose() * &kff;
        vxx = &qxx + &kt * &quu * &kfb + &kt * &qux + qux.transpose() * &kfb;
        symmetrize(&mut vxx);
        feedback[k] = kfb;
        feedforward[k] = kff;
        regularization[k] = lambda;
    }
    Ok(BackwardPass {
        feedback,
        feedforward,
        d1,
        d2,
        regularization,
        max_costate,
    })
}

/// Closed-loop rollout `u = u_prev + alpha k + K (x - x_prev)` through the implicit dynamics.
pub fn forward_rollout(ocp: &OcpDefinition, gains: &BackwardPass, prev: &Trajectory, alpha: f64) -> Result<Trajectory, SqpError> {
    let n = prev.horizon();
    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    states.push(ocp.x0.clone());
    for k in 0..n {
        let dx = &states[k] - &prev.states[k];
        let u = &prev.controls[k] + &gains.feedforward[k] * alpha + &gains.feedback[k] * dx;
        let next = step_backward_euler(ocp.dynamics.as_ref(), k + 1, &states[k], &u, ocp.dt)?;
        controls.push(u);
        states.push(next);
    }
    Ok(Trajectory { states, controls })
}

const DEFECT_WEIGHT_MARGIN: f64 = 2.0;
/// Defects below this are left to the next iteration instead of a projection.
const PROJECTION_TOL: f64 = 1e-9;

/// Full Newton step `(dx, du)` of the LQ model, with `dx_0 = 0`.
pub fn linear_rollout(stages: &[LqStage], pass: &BackwardPass) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let nx = stages.first().map_or(0, |s| s.a.nrows());
    let mut dxs = vec![DVector::zeros(nx)];
    let mut dus = Vec::with_capacity(stages.len());
    for (k, s) in stages.iter().enumerate() {
        let du = &pass.feedforward[k] + &pass.feedback[k] * &dxs[k];
        dxs.push(&s.a * &dxs[k] + &s.b * &du + &s.d);
        dus.push(du);
    }
    (dxs, dus)
}

fn step_along(traj: &Trajectory, dxs: &[DVector<f64>], dus: &[DVector<f64>], alpha: f64) -> Trajectory {
    Trajectory {
        states: traj.states.iter().zip(dxs).map(|(x, dx)| x + dx * alpha).collect(),
        controls: traj.controls.iter().zip(dus).map(|(u, du)| u + du * alpha).collect(),
    }
}

/// First-order change of the merit along the full step.
fn directional_derivative(
    ocp: &OcpDefinition,
    model: &LqModel,
    dxs: &[DVector<f64>],
    dus: &[DVector<f64>],
    traj: &Trajectory,
    defect_weight: f64,
) -> f64 {
    let mut slope = model.terminal_vx.dot(&dxs[dxs.len() - 1]);
    for (k, s) in model.stages.iter().enumerate() {
        slope += s.lx.dot(&dxs[k]) + s.lu.dot(&dus[k]);
    }
    slope - defect_weight * defect_norm(ocp, traj)
}

fn defect_norm(ocp: &OcpDefinition, traj: &Trajectory) -> f64 {
    let mut defect = 0.0;
    for k in 0..traj.horizon() {
        if let Ok(f) = ocp.dynamics.derivative(k + 1, &traj.states[k + 1], &traj.controls[k]) {
            defect += (&traj.states[k + 1] - &traj.states[k] - f * ocp.dt).lp_norm(1);
        }
    }
    defect
}

/// Cost plus `defect_weight` times the l1 dynamics defect.
fn merit(ocp: &OcpDefinition, traj: &Trajectory, defect_weight: f64) -> (f64, CostBreakdown) {
    let cost = ocp.evaluate(traj);
    (cost.total() + defect_weight * defect_norm(ocp, traj), cost)
}

/// Quadratic model of the whole horizon around `traj`, with the linearized residuals.
#[derive(Debug, Clone)]
pub struct LqModel {
    pub stages: Vec<LqStage>,
    pub terminal_vx: DVector<f64>,
    pub terminal_vxx: DMatrix<f64>,
    /// `N + 1` residual sets, Jacobians included.
    pub residuals: Vec<Vec<Residual>>,
}

pub fn build_lq_model(ocp: &OcpDefinition, traj: &Trajectory) -> Result<LqModel, SqpError> {
    let n = ocp.horizon();
    let q_term = &ocp.q * ocp.terminal_scale;
    let mut stages = Vec::with_capacity(n);
    let mut residuals = Vec::with_capacity(n + 1);
    for k in 0..n {
        let (x, xn, u) = (&traj.states[k], &traj.states[k + 1], &traj.controls[k]);
        let (a, b) = linearize_at(ocp.dynamics.as_ref(), k + 1, xn, u, ocp.dt)?;
        let defect = xn - x - ocp.dynamics.derivative(k + 1, xn, u)? * ocp.dt;
        let d = -(&a * defect);
        let res = ocp.residuals(k, x, Some(u), Some(xn), true);
        let quad = quadraticize_stage(&ocp.stage_terms(k, traj, &res, &ocp.q), Some((&a, &b)));
        stages.push(LqStage {
            a,
            b,
            d,
            lx: quad.lx,
            lu: quad.lu,
            lxx: quad.lxx,
            luu: quad.luu,
            lux: quad.lux,
        });
        residuals.push(res);
    }
    let res = ocp.residuals(n, &traj.states[n], None, None, true);
    let quad = quadraticize_stage(&ocp.stage_terms(n, traj, &res, &q_term), None);
    residuals.push(res);
    Ok(LqModel {
        stages,
        terminal_vx: quad.lx,
        terminal_vxx: quad.lxx,
        residuals,
    })
}

/// Runs up to `settings.max_iters` SQP iterations from `init`.
///
/// `init` is used as the linearization point with its first state replaced by `ocp.x0`;
/// an `init` without states is rolled out open loop first. Steps follow the linear
/// model including its defects (multiple shooting) and are accepted on an l1 merit
/// of cost plus weighted defects. Iteration stops when no step passes the Armijo test.
pub fn solve_subproblem(ocp: &OcpDefinition, init: &Trajectory, settings: &SqpSettings) -> Result<SolveReport, SqpError> {
    let start = Instant::now();
    ocp.validate()?;
    let n = ocp.horizon();
    if init.controls.len() != n || init.controls.iter().any(|u| u.len() != ocp.control_dim()) {
        return Err(SqpError::Dimension("initial controls".into()));
    }
    let consistent = init.states.len() == n + 1
        && init.states.iter().all(|x| x.len() == ocp.state_dim() && x.iter().all(|v| v.is_finite()));
    let mut traj = if consistent {
        let mut t = init.clone();
        t.states[0] = ocp.x0.clone();
        t
    } else {
        ocp.rollout(&init.controls)?
    };
    let mut defect_weight = ocp.penalty.equality_weight;
    let (mut current, mut cost) = merit(ocp, &traj, defect_weight);
    if !current.is_finite() {
        return Err(SqpError::NonFiniteInit);
    }
    let initial_merit = current;
    let mut steps = Vec::new();
    let mut merit_steps = Vec::new();
    let mut projected = false;
    let mut iterations = 0;
    let mut gains = None;
    for _ in 0..settings.max_iters {
        iterations += 1;
        let model = build_lq_model(ocp, &traj)?;
        let pass = riccati_backward_pass(&model.stages, (&model.terminal_vx, &model.terminal_vxx))?;
        let done = -pass.predicted(1.0) < settings.tolerance;
        gains = Some(pass);
        let pass = gains.as_ref().expect("just set");
        if done {
            steps.push(0.0);
            break;
        }
        // The l1 merit is exact only once its weight dominates the dynamics multipliers.
        if pass.max_costate * DEFECT_WEIGHT_MARGIN > defect_weight {
            defect_weight = pass.max_costate * DEFECT_WEIGHT_MARGIN;
            current = merit(ocp, &traj, defect_weight).0;
        }
        let (dxs, dus) = linear_rollout(&model.stages, pass);
        let slope = directional_derivative(ocp, &model, &dxs, &dus, &traj, defect_weight);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=settings.max_backtracks {
            let cand = step_along(&traj, &dxs, &dus, alpha);
            let (m, c) = merit(ocp, &cand, defect_weight);
            if m.is_finite() && m < current && m - current <= settings.armijo * alpha * slope.min(0.0) {
                accepted = Some((cand, m, c));
                break;
            }
            alpha *= settings.backtrack_ratio;
        }
        match accepted {
            Some((cand, m, c)) => {
                merit_steps.push((current, m));
                traj = cand;
                current = m;
                cost = c;
                steps.push(alpha);
            }
            None => {
                merit_steps.push((current, current));
                steps.push(0.0);
                break;
            }
        }
    }
    if settings.project && ocp.max_defect(&traj) > PROJECTION_TOL {
        if let Some(pass) = &gains {
            // The first control is unchanged since the rollout starts on `x0`.
            if let Ok(p) = forward_rollout(ocp, pass, &traj, 0.0) {
                let (m, c) = merit(ocp, &p, defect_weight);
                if m.is_finite() {
                    traj = p;
                    current = m;
                    cost = c;
                    projected = true;
                }
            }
        }
    }
    Ok(SolveReport {
        max_defect: ocp.max_defect(&traj),
        max_equality_violation: ocp.max_equality_violation(&traj),
        trajectory: traj,
        iterations,
        initial_merit,
        merit: current,
        cost,
        step_sizes: steps,
        merit_steps,
        projected,
        wall_time: start.elapsed().as_secs_f64(),
    })
}
