//! Centralized baseline: the joint problem over the stacked system, solved with the same
//! SQP as the sub-blocks.

use nalgebra::DVector;

use crate::admm::SubTrajectories;
use crate::cost::stage_cost;
use crate::model::RIGID_BODY_DIM;
use crate::problem::{stack_controls, stack_state, Scenario, Window};
use crate::sqp::{solve_subproblem, OcpDefinition, SolveReport, SqpError, SqpSettings, Trajectory};

pub fn build_stacked_ocp(scenario: &Scenario, window: &Window, x0: &DVector<f64>) -> OcpDefinition {
    window.centralized_ocp(scenario, x0)
}

pub fn solve_centralized(ocp: &OcpDefinition, init: &Trajectory, settings: &SqpSettings) -> Result<SolveReport, SqpError> {
    solve_subproblem(ocp, init, settings)
}

/// Joint trajectory from sub-trajectories (wrench copies are dropped).
pub fn stack_trajectories(sub: &SubTrajectories) -> Trajectory {
    let n = sub.payload.horizon();
    Trajectory {
        states: (0..=n)
            .map(|k| {
                let robots: Vec<_> = sub.robots.iter().map(|r| r.states[k].clone()).collect();
                stack_state(&sub.payload.states[k], &robots)
            })
            .collect(),
        controls: (0..n)
            .map(|k| {
                let robots: Vec<_> = sub.robots.iter().map(|r| r.controls[k].clone()).collect();
                stack_controls(&robots)
            })
            .collect(),
    }
}

/// Splits a joint trajectory; copies are set to the exact Newton-pair reactions.
pub fn split_trajectory(scenario: &Scenario, joint: &Trajectory) -> SubTrajectories {
    let nx = scenario.robot_state_dim();
    let nu = scenario.layout().dim();
    let h = scenario.layout().hand_force();
    let robots = (0..scenario.robots)
        .map(|i| Trajectory {
            states: joint.states.iter().map(|x| x.rows(RIGID_BODY_DIM + i * nx, nx).into_owned()).collect(),
            controls: joint.controls.iter().map(|u| u.rows(i * nu, nu).into_owned()).collect(),
        })
        .collect::<Vec<_>>();
    let payload = Trajectory {
        states: joint.states.iter().map(|x| x.rows(0, RIGID_BODY_DIM).into_owned()).collect(),
        controls: joint
            .controls
            .iter()
            .map(|u| {
                DVector::from_fn(6 * scenario.robots, |row, _| {
                    let (i, a) = (row / 6, row % 6);
                    -u[i * nu + h + a]
                })
            })
            .collect(),
    };
    SubTrajectories { payload, robots }
}

/// Tracking and regularization cost of the joint plan, without penalties or copies.
pub fn joint_cost(scenario: &Scenario, window: &Window, sub: &SubTrajectories) -> f64 {
    let w = &scenario.config.weights;
    let n = window.horizon();
    let qp = w.payload_q();
    let qr = w.robot_q(scenario.n_feet);
    let rr = w.robot_r(scenario.n_feet);
    let none = DVector::zeros(0);
    let mut total = 0.0;
    for k in 0..=n {
        let scale = if k == n { w.terminal_scale } else { 1.0 };
        total += stage_cost(&sub.payload.states[k], None, &window.refs.payload[k], &(&qp * scale), &none);
        for (i, r) in sub.robots.iter().enumerate() {
            let u = (k < n).then(|| &r.controls[k]);
            total += stage_cost(&r.states[k], u, &window.refs.robots[i][k], &(&qr * scale), &rr);
        }
    }
    total
}
