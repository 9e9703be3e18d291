//! Finite-difference checks of constraint residuals on real window problems.

use loco_admm::constraints::Residual;
use loco_admm::cost::stage_value;
use loco_admm::model::step_backward_euler;
use loco_admm::nalgebra::{DMatrix, DVector, Vector6};
use loco_admm::problem::{stack_state, Scenario, Window};
use loco_admm::sim::WorldState;
use loco_admm::sqp::{OcpDefinition, Trajectory};

use super::*;

/// Payload, robot 0 and centralized problems of the first window, each with a
/// rolled-out, perturbed trajectory.
pub fn problems(sc: &Scenario, seed: u64) -> Vec<(&'static str, OcpDefinition, Trajectory)> {
    let world = WorldState::initial(sc);
    let window: Window = sc.window(0.0, &world.robots);
    let guess = sc.initial_guess(&window, &world.payload, &world.robots);
    let duals = vec![vec![Vector6::repeat(0.1); window.horizon()]; sc.robots];
    let payload = window.payload_ocp(sc, &world.payload, &guess.robots, &duals, 10.0);
    let robot = window.robot_ocp(sc, 0, &world.robots[0], &guess.payload, &duals[0], 10.0);
    let joint = window.centralized_ocp(sc, &stack_state(&world.payload, &world.robots));
    let joint_controls = (0..window.horizon())
        .map(|k| {
            let v: Vec<f64> = guess.robots.iter().flat_map(|t| t.controls[k].iter().copied()).collect();
            DVector::from_vec(v)
        })
        .collect::<Vec<_>>();
    let mut rng = rng(seed);
    let mut out = Vec::new();
    for (name, ocp, controls) in [
        ("payload", payload, guess.payload.controls.clone()),
        ("robot", robot, guess.robots[0].controls.clone()),
        ("centralized", joint, joint_controls),
    ] {
        let controls: Vec<DVector<f64>> = controls
            .iter()
            .map(|u| u + random_vector(&mut rng, u.len(), 0.1))
            .collect();
        let traj = ocp.rollout(&controls).expect("rollout");
        out.push((name, ocp, traj));
    }
    out
}

pub fn perturb(traj: &Trajectory, rng: &mut rand_chacha::ChaCha8Rng) -> Trajectory {
    Trajectory {
        states: traj.states.iter().map(|x| x + random_vector(rng, x.len(), 0.02)).collect(),
        controls: traj.controls.clone(),
    }
}

/// Dense Jacobian of one residual block over `[x; u]`.
pub fn dense(res: &Residual, nz: usize) -> DMatrix<f64> {
    let mut full = DMatrix::zeros(res.values.len(), nz);
    for (c, col) in res.cols.iter().enumerate() {
        for r in 0..res.values.len() {
            full[(r, *col)] += res.jac[(r, c)];
        }
    }
    full
}

pub fn dense_next(res: &Residual, n: usize) -> DMatrix<f64> {
    let mut full = DMatrix::zeros(res.values.len(), n);
    if let Some((cols, jac)) = &res.next {
        for (c, col) in cols.iter().enumerate() {
            for r in 0..res.values.len() {
                full[(r, *col)] += jac[(r, c)];
            }
        }
    }
    full
}

pub fn values(res: &[Residual]) -> DVector<f64> {
    DVector::from_iterator(res.iter().map(|r| r.values.len()).sum(), res.iter().flat_map(|r| r.values.iter().copied()))
}

pub fn check_residual_jacobians(name: &str, ocp: &OcpDefinition, traj: &Trajectory, knots: &[usize]) -> usize {
    let (n, m) = (ocp.state_dim(), ocp.control_dim());
    let mut checked = 0;
    for &k in knots {
        let terminal = k == traj.horizon();
        let x = &traj.states[k];
        let u = (!terminal).then(|| traj.controls[k].clone());
        let xn = (!terminal).then(|| traj.states[k + 1].clone());
        let res = ocp.residuals(k, x, u.as_ref(), xn.as_ref(), true);
        let nz = n + u.as_ref().map_or(0, |u| u.len());
        let rows: usize = res.iter().map(|r| r.values.len()).sum();
        let mut analytic = DMatrix::zeros(rows, nz);
        let mut analytic_next = DMatrix::zeros(rows, n);
        let mut row = 0;
        for r in &res {
            let len = r.values.len();
            analytic.rows_mut(row, len).copy_from(&dense(r, nz));
            analytic_next.rows_mut(row, len).copy_from(&dense_next(r, n));
            row += len;
        }
        let z = match &u {
            Some(u) => DVector::from_iterator(nz, x.iter().chain(u.iter()).copied()),
            None => x.clone(),
        };
        let eval_z = |z: &DVector<f64>| {
            let xz = z.rows(0, n).into_owned();
            let uz = (!terminal).then(|| z.rows(n, m).into_owned());
            values(&ocp.residuals(k, &xz, uz.as_ref(), xn.as_ref(), false))
        };
        let numeric = fd_jacobian(eval_z, &z);
        let err = scaled_error(&analytic, &numeric);
        assert!(err <= FD_TOL, "{name} knot {k}: residual jacobian error {err:e}");
        if let Some(xn) = &xn {
            let eval_next = |xn: &DVector<f64>| values(&ocp.residuals(k, x, u.as_ref(), Some(xn), false));
            let numeric = fd_jacobian(eval_next, xn);
            let err = scaled_error(&analytic_next, &numeric);
            assert!(err <= FD_TOL, "{name} knot {k}: next-state jacobian error {err:e}");
        }
        checked += res.len();
    }
    checked
}

pub fn scenario_named(name: &str) -> Scenario {
    scenario(name, if name == "obstacle-field" { 3 } else { 2 })
}

/// Stage cost at `(x, u)` with the next state produced by the implicit step, as the SQP sees it.
pub fn composed_cost(ocp: &OcpDefinition, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
    let xn = step_backward_euler(ocp.dynamics.as_ref(), k + 1, x, u, ocp.dt).expect("step");
    let res = ocp.residuals(k, x, Some(u), Some(&xn), false);
    let mut traj = Trajectory {
        states: vec![DVector::zeros(x.len()); ocp.horizon() + 1],
        controls: vec![DVector::zeros(u.len()); ocp.horizon()],
    };
    traj.states[k] = x.clone();
    traj.states[k + 1] = xn;
    traj.controls[k] = u.clone();
    stage_value(&ocp.stage_terms(k, &traj, &res, &ocp.q)).total()
}

/// Largest gap between the model gradient and a finite difference of the composed cost
/// at knot `k`, relative to the gradient scale since barrier terms make the cost large.
pub fn stage_gradient_error(ocp: &OcpDefinition, traj: &Trajectory, k: usize) -> f64 {
    let (n, m) = (ocp.state_dim(), ocp.control_dim());
    let (x, u) = (&traj.states[k], &traj.controls[k]);
    let model = loco_admm::sqp::build_lq_model(ocp, traj).expect("model");
    let stage = &model.stages[k];
    let z = DVector::from_iterator(n + m, x.iter().chain(u.iter()).copied());
    let f = |z: &DVector<f64>| DVector::from_element(1, composed_cost(ocp, k, &z.rows(0, n).into_owned(), &z.rows(n, m).into_owned()));
    let numeric = fd_jacobian(f, &z).transpose();
    let analytic = DMatrix::from_iterator(n + m, 1, stage.lx.iter().chain(stage.lu.iter()).copied());
    (&analytic - &numeric).amax() / analytic.amax().max(1.0)
}
